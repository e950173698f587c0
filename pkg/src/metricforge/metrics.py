"""Depth accuracy, occluding-contour boundary scores and field-of-view error."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyOverlap, NonPositiveDepth, NonPositiveFocal
from .geometry import DepthGrid

DELTA_BASE = 1.25
DEFAULT_BOUNDARY_THRESHOLDS = (5.0, 10.0, 15.0, 20.0, 25.0)


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    rmse: float
    mae: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def _overlap(pred: DepthGrid, gt: DepthGrid) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = pred.mask & gt.mask
    if not mask.any():
        raise EmptyOverlap("prediction and ground truth share no valid pixel")
    p, g = pred.depth[mask], gt.depth[mask]
    if (p <= 0).any() or (g <= 0).any():
        raise NonPositiveDepth("depth metrics need positive depths")
    return p, g


def depth_metrics(pred: DepthGrid, gt: DepthGrid) -> MetricsReport:
    """AbsRel, RMSE, MAE, log10 and threshold accuracies (percent) over the joint valid mask."""
    p, g = _overlap(pred, gt)
    n = p.size
    err = p - g
    ratio = np.maximum(p / g, g / p)
    deltas = [100.0 * np.count_nonzero(ratio < DELTA_BASE ** k) / n for k in (1, 2, 3)]
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(err) / g)),
        rmse=float(np.sqrt(np.mean(err * err))),
        mae=float(np.mean(np.abs(err))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        pixel_count=n,
    )


def merge_metrics(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Pixel-count weighted merge; RMSE is merged through the mean squared error."""
    reports = list(reports)
    total = sum(r.pixel_count for r in reports)
    if total == 0:
        raise EmptyOverlap("nothing to merge")

    def avg(name: str) -> float:
        # sum of count-weighted values first, so e.g. all-100% inputs merge to exactly 100
        return math.fsum(r.pixel_count * getattr(r, name) for r in reports) / total

    return MetricsReport(
        abs_rel=avg("abs_rel"),
        rmse=math.sqrt(math.fsum(r.pixel_count * r.rmse ** 2 for r in reports) / total),
        mae=avg("mae"),
        log10=avg("log10"),
        delta1=avg("delta1"),
        delta2=avg("delta2"),
        delta3=avg("delta3"),
        pixel_count=total,
    )


# --------------------------------------------------------------------------
# boundary metrics


@dataclass(frozen=True)
class BoundaryRecord:
    t: float
    precision: float
    recall: float
    f1: float
    matched: int
    pred_contours: int
    gt_contours: int

    @classmethod
    def from_counts(cls, t: float, matched: int, pred_contours: int, gt_contours: int) -> BoundaryRecord:
        precision = matched / pred_contours if pred_contours else 0.0
        recall = matched / gt_contours if gt_contours else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(t, precision, recall, f1, matched, pred_contours, gt_contours)


@dataclass(frozen=True)
class BoundaryReport:
    records: tuple[BoundaryRecord, ...]

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r.f1 for r in self.records])) if self.records else 0.0

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "mean_f1": self.mean_f1}


def _neighbor_pairs(d: np.ndarray, valid: np.ndarray):
    """(first, second, pair-valid) arrays for every ordered 4-neighbor pair.

    Horizontal and vertical adjacencies are each taken in both orientations.
    """
    h_a, h_b = d[:, :-1], d[:, 1:]
    v_a, v_b = d[:-1, :], d[1:, :]
    hv = valid[:, :-1] & valid[:, 1:]
    vv = valid[:-1, :] & valid[1:, :]
    first = np.concatenate([h_a.ravel(), h_b.ravel(), v_a.ravel(), v_b.ravel()])
    second = np.concatenate([h_b.ravel(), h_a.ravel(), v_b.ravel(), v_a.ravel()])
    ok = np.concatenate([hv.ravel(), hv.ravel(), vv.ravel(), vv.ravel()])
    return first[ok], second[ok]


def occluding_contours(d_first: np.ndarray, d_second: np.ndarray, t: float) -> np.ndarray:
    """Iverson bracket ``d(j) / d(i) > 1 + t/100`` for pixel pairs (i, j)."""
    return d_second / d_first > 1.0 + t / 100.0


def boundary_f1(pred: DepthGrid, gt: DepthGrid,
                thresholds: Sequence[float] = DEFAULT_BOUNDARY_THRESHOLDS) -> BoundaryReport:
    """Precision, recall and F1 of prediction contours against ground-truth contours.

    Precision is measured over prediction contours and recall over
    ground-truth contours. A score with an empty denominator is 0, and so is
    F1 whenever precision + recall is 0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = pred.mask & gt.mask
    if not valid.any():
        raise EmptyOverlap("prediction and ground truth share no valid pixel")
    p_i, p_j = _neighbor_pairs(pred.depth, valid)
    g_i, g_j = _neighbor_pairs(gt.depth, valid)
    records = []
    for t in thresholds:
        cp = occluding_contours(p_i, p_j, t)
        cg = occluding_contours(g_i, g_j, t)
        records.append(BoundaryRecord.from_counts(
            float(t), int(np.count_nonzero(cp & cg)), int(cp.sum()), int(cg.sum())
        ))
    return BoundaryReport(tuple(records))


def merge_boundary(reports: Iterable[BoundaryReport]) -> BoundaryReport:
    """Sum contour counts per threshold across images and recompute the scores."""
    reports = list(reports)
    if not reports:
        return BoundaryReport(())
    merged = []
    for recs in zip(*(r.records for r in reports)):
        ts = {r.t for r in recs}
        if len(ts) != 1:
            raise ValueError("boundary reports use different thresholds")
        merged.append(BoundaryRecord.from_counts(
            recs[0].t,
            sum(r.matched for r in recs),
            sum(r.pred_contours for r in recs),
            sum(r.gt_contours for r in recs),
        ))
    return BoundaryReport(tuple(merged))


# --------------------------------------------------------------------------
# camera intrinsics


def horizontal_fov(focal: float, width: float) -> float:
    """Horizontal field of view in radians."""
    if focal <= 0:
        raise NonPositiveFocal(f"focal length must be positive, got {focal}")
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    return 2.0 * math.atan(width / (2.0 * focal))


def fov_error(pred_focal: float, gt_focal: float, width: float) -> float:
    """Absolute horizontal FOV difference in degrees."""
    return abs(horizontal_fov(pred_focal, width) - horizontal_fov(gt_focal, width)) * 180.0 / math.pi
