import itertools
import math

import numpy as np
import pytest

from metricforge.errors import EmptyOverlap, NonPositiveFocal
from metricforge.geometry import DepthGrid
from metricforge.metrics import (
    BoundaryRecord,
    boundary_f1,
    depth_metrics,
    fov_error,
    horizontal_fov,
    merge_boundary,
    merge_metrics,
)

from oracles import boundary_oracle, metrics_oracle
from conftest import random_grid

ALPHABET = (1.0, 1.12, 1.3)
THRESHOLDS = (5.0, 10.0, 15.0, 20.0, 25.0)




def assert_boundary_matches(pred, gt):
    report = boundary_f1(pred, gt, THRESHOLDS)
    for rec, t in zip(report.records, THRESHOLDS):
        assert (rec.matched, rec.pred_contours, rec.gt_contours) == boundary_oracle(pred, gt, t)
        m, npred, ngt = boundary_oracle(pred, gt, t)
        assert rec.precision == (m / npred if npred else 0.0)
        assert rec.recall == (m / ngt if ngt else 0.0)


def grid(values, shape, mask=None):
    d = np.asarray(values, dtype=float).reshape(shape)
    return DepthGrid(d, np.ones(shape, dtype=bool) if mask is None else mask)


class TestDepthMetrics:
    def test_identical(self, rng):
        g = random_grid(rng)
        rep = depth_metrics(g, g)
        assert (rep.abs_rel, rep.rmse, rep.mae, rep.log10) == (0.0, 0.0, 0.0, 0.0)
        assert (rep.delta1, rep.delta2, rep.delta3) == (100.0, 100.0, 100.0)
        assert rep.pixel_count == g.valid_count

    @pytest.mark.parametrize("ratio, deltas", [
        (1.2, (100.0, 100.0, 100.0)),
        (1.26, (0.0, 100.0, 100.0)),
        (1 / 1.26, (0.0, 100.0, 100.0)),
        (1.6, (0.0, 0.0, 100.0)),
        (2.0, (0.0, 0.0, 0.0)),
    ])
    def test_threshold_straddles(self, rng, ratio, deltas):
        g = random_grid(rng, invalid=0.0)
        p = DepthGrid(ratio * g.depth, g.mask)
        rep = depth_metrics(p, g)
        assert (rep.delta1, rep.delta2, rep.delta3) == deltas

    def test_matches_loop_oracle(self, rng):
        for _ in range(100):
            shape = tuple(rng.integers(1, 20, size=2))
            p, g = random_grid(rng, shape, 0.1, 100.0), random_grid(rng, shape, 0.1, 100.0)
            if not (p.mask & g.mask).any():
                continue
            rep = depth_metrics(p, g).to_dict()
            for key, value in metrics_oracle(p, g).items():
                assert abs(rep[key] - value) <= 1e-12 * max(1.0, abs(value)), key

    def test_empty_overlap(self):
        a = DepthGrid(np.array([[1.0, 0.0]]), np.array([[1, 0]]))
        b = DepthGrid(np.array([[0.0, 1.0]]), np.array([[0, 1]]))
        with pytest.raises(EmptyOverlap):
            depth_metrics(a, b)

    def test_merge_is_pixel_weighted(self, rng):
        p1, g1 = random_grid(rng, (8, 8)), random_grid(rng, (8, 8))
        p2, g2 = random_grid(rng, (5, 9)), random_grid(rng, (5, 9))
        merged = merge_metrics([depth_metrics(p1, g1), depth_metrics(p2, g2)])
        stacked = depth_metrics(
            DepthGrid(np.concatenate([p1.depth.ravel(), p2.depth.ravel()])[None], np.concatenate([p1.mask.ravel(), p2.mask.ravel()])[None]),
            DepthGrid(np.concatenate([g1.depth.ravel(), g2.depth.ravel()])[None], np.concatenate([g1.mask.ravel(), g2.mask.ravel()])[None]),
        )
        for key, value in stacked.to_dict().items():
            assert merged.to_dict()[key] == pytest.approx(value, rel=1e-12), key


class TestBoundary:
    def test_single_step(self):
        # one discontinuity: the left-to-right pair 1 -> 2 exceeds every threshold
        g = grid([1.0, 2.0], (1, 2))
        rec = boundary_f1(g, g).records[0]
        assert (rec.matched, rec.pred_contours, rec.gt_contours) == (1, 1, 1)
        assert rec.f1 == 1.0

    def test_roles_are_not_symmetric(self):
        pred = grid([1.0, 2.0, 4.0], (1, 3))
        gt = grid([1.0, 2.0, 2.0], (1, 3))
        rec = boundary_f1(pred, gt, [10]).records[0]
        assert (rec.precision, rec.recall) == (0.5, 1.0)
        assert rec.f1 == pytest.approx(2 / 3)

    def test_no_contours_is_zero(self):
        g = grid(np.ones(4), (2, 2))
        rec = boundary_f1(g, g).records[0]
        assert (rec.precision, rec.recall, rec.f1) == (0.0, 0.0, 0.0)

    def test_invalid_pairs_skipped(self):
        mask = np.array([[True, False]])
        g = DepthGrid(np.array([[1.0, 0.0]]), mask)
        assert boundary_f1(g, g).records[0].pred_contours == 0

    def test_exhaustive_small_grids(self):
        """Every (pred, gt) pair of 3-value grids with at most four pixels."""
        shapes = [(h, w) for h in range(1, 5) for w in range(1, 5) if h * w <= 4]
        for shape in shapes:
            n = shape[0] * shape[1]
            grids = [grid(v, shape) for v in itertools.product(ALPHABET, repeat=n)]
            for pred, gt in itertools.product(grids, repeat=2):
                assert_boundary_matches(pred, gt)

    def test_exhaustive_local_configurations_5x5(self):
        """All 81 value assignments of an adjacent pixel pair, at every adjacency of a 5x5 grid."""
        base = np.full((5, 5), ALPHABET[1])
        adjacencies = [((r, c), (r, c + 1)) for r in range(5) for c in range(4)]
        adjacencies += [((r, c), (r + 1, c)) for r in range(4) for c in range(5)]
        for (a, b) in adjacencies:
            for pa, pb, ga, gb in itertools.product(ALPHABET, repeat=4):
                p, g = base.copy(), base.copy()
                p[a], p[b], g[a], g[b] = pa, pb, ga, gb
                assert_boundary_matches(grid(p, (5, 5)), grid(g, (5, 5)))

    def test_random_grids_up_to_5x5(self, rng):
        for h, w in itertools.product(range(1, 6), repeat=2):
            for _ in range(40):
                vals = np.asarray(ALPHABET)
                mask = rng.random((h, w)) > 0.15
                if not mask.any():
                    continue
                pred = DepthGrid(np.where(mask, vals[rng.integers(0, 3, (h, w))], 0.0), mask)
                gt = DepthGrid(vals[rng.integers(0, 3, (h, w))], np.ones((h, w), dtype=bool))
                assert_boundary_matches(pred, gt)

    def test_merge_sums_counts(self):
        recs = BoundaryRecord.from_counts(5.0, 1, 2, 4), BoundaryRecord.from_counts(5.0, 3, 4, 4)
        from metricforge.metrics import BoundaryReport
        merged = merge_boundary([BoundaryReport((recs[0],)), BoundaryReport((recs[1],))]).records[0]
        assert (merged.matched, merged.pred_contours, merged.gt_contours) == (4, 6, 8)
        assert merged.precision == 4 / 6 and merged.recall == 0.5


class TestFov:
    def test_ninety_degrees(self):
        assert abs(math.degrees(horizontal_fov(500.0, 1000.0)) - 90.0) <= 1e-9

    def test_error(self):
        assert fov_error(1000.0, 500.0, 1000.0) == pytest.approx(36.8698976, abs=1e-6)
        assert fov_error(500.0, 500.0, 1000.0) == 0.0

    def test_non_positive_focal(self):
        with pytest.raises(NonPositiveFocal):
            horizontal_fov(0.0, 100.0)
