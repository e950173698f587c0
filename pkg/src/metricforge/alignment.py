"""Global affine and pixel-wise scale alignment of a dense depth map to sparse targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFit, NonPositiveSourceAtPrompt, NoUsablePrompts
from .geometry import DepthGrid, _frozen

if TYPE_CHECKING:
    from .prompting import SparsePrompt


@dataclass(frozen=True)
class AffineFit:
    scale: float
    shift: float
    residual_rms: float
    sample_count: int

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.scale * values + self.shift


@dataclass(frozen=True, eq=False)
class ScaleField:
    scale: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale", _frozen(np.array(self.scale, dtype=np.float64)))
        object.__setattr__(self, "mask", _frozen(np.array(self.mask, dtype=bool)))

    @property
    def height(self) -> int:
        return self.scale.shape[0]

    @property
    def width(self) -> int:
        return self.scale.shape[1]


def _usable(source: DepthGrid, targets: SparsePrompt) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Prompt entries that land on valid source pixels: (x, y, d, source value)."""
    targets.check_bounds(source.width, source.height)
    hit = source.mask[targets.y, targets.x]
    x, y, d = targets.x[hit], targets.y[hit], targets.d[hit]
    return x, y, d, source.depth[y, x]


def lsq_scale_shift(source: DepthGrid, targets: SparsePrompt) -> AffineFit:
    """Least-squares ``(a, b)`` minimizing ``sum (a * source(x_i, y_i) + b - d_i)^2``."""
    _, _, d, s = _usable(source, targets)
    n = s.size
    if n < 2:
        raise DegenerateFit(f"need at least 2 prompt points on valid pixels, got {n}")
    s_mean = s.mean()
    d_mean = d.mean()
    ds = s - s_mean
    var = ds @ ds
    if var == 0.0 or np.ptp(s) == 0.0:
        raise DegenerateFit("source values at prompt pixels have zero variance")
    a = (ds @ (d - d_mean)) / var
    b = d_mean - a * s_mean
    resid = a * s + b - d
    return AffineFit(float(a), float(b), float(np.sqrt(resid @ resid / n)), n)


def _neighbors(tree: cKDTree, anchors: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and Euclidean distances of the k nearest anchors per query.

    Ties in distance resolve to the anchor with the lowest (y, x); anchors are
    expected sorted that way so the anchor index is the tie key.
    """
    n_anchor = anchors.shape[0]
    k_query = min(n_anchor, k + 8)
    _, idx = tree.query(queries, k=k_query)
    idx = idx.reshape(queries.shape[0], k_query)
    diff = anchors[idx] - queries[:, None, :]
    dist2 = (diff * diff).sum(axis=-1)  # integer valued, exact
    order = np.lexsort((idx, dist2), axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)
    dist2 = np.take_along_axis(dist2, order, axis=-1)

    if k_query < n_anchor:
        # the tie group at rank k may extend past what we fetched
        spill = dist2[:, k - 1] == dist2[:, -1]
        for qi in np.flatnonzero(spill):
            cand = np.asarray(tree.query_ball_point(queries[qi], np.sqrt(dist2[qi, k - 1]) + 1e-9))
            cd = ((anchors[cand] - queries[qi]) ** 2).sum(axis=-1)
            o = np.lexsort((cand, cd))
            idx[qi] = cand[o][:k_query]
            dist2[qi] = cd[o][:k_query]

    return idx[:, :k], np.sqrt(dist2[:, :k].astype(np.float64))


def pixelwise_scale_field(source: DepthGrid, targets: SparsePrompt, k: int = 4) -> ScaleField:
    """Dense scale field from per-prompt ratios ``d_i / source(x_i, y_i)``.

    Each valid source pixel takes the inverse-distance weighted mean of its k
    nearest prompt ratios; prompt pixels take their own ratio exactly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x, y, d, s = _usable(source, targets)
    if x.size == 0:
        raise NoUsablePrompts("no prompt point lands on a valid source pixel")
    if (s <= 0).any():
        raise NonPositiveSourceAtPrompt("source depth must be positive at prompt pixels")

    order = np.lexsort((x, y))
    x, y, d, s = x[order], y[order], d[order], s[order]
    ratios = d / s
    k = min(k, x.size)

    anchors = np.stack((x, y), axis=-1).astype(np.int64)
    qy, qx = np.nonzero(source.mask)
    queries = np.stack((qx, qy), axis=-1).astype(np.int64)

    scale = np.zeros(source.shape)
    if queries.shape[0]:
        tree = cKDTree(anchors)
        idx, dist = _neighbors(tree, anchors, queries, k)
        exact = dist[:, 0] == 0.0
        with np.errstate(divide="ignore"):
            w = 1.0 / dist
        w[exact] = 0.0
        w[exact, 0] = 1.0
        vals = (w * ratios[idx]).sum(axis=-1) / w.sum(axis=-1)
        scale[qy, qx] = vals
    scale[y, x] = ratios
    return ScaleField(scale, source.mask)
