"""Focal length recovery from a camera-frame point map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRays, DimensionMismatch, InsufficientPoints
from .geometry import PointMap

Z_FLOOR = 1e-6
W_FLOOR = 1e-9
MIN_POINTS = 10


@dataclass(frozen=True)
class FocalEstimate:
    focal: float
    iterations: int
    final_objective: float
    converged: bool
    history: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "iterations": self.iterations,
            "final_objective": self.final_objective,
            "converged": self.converged,
        }


def focal_problem(pmap: PointMap, weights: np.ndarray | None = None):
    """Normalized rays ``u``, center-relative pixel coordinates ``r`` and per-point weights.

    The image center is ``((W - 1) / 2, (H - 1) / 2)`` in pixel-center coordinates.
    """
    coords = pmap.coords
    sel = pmap.mask & (coords[..., 2] > Z_FLOOR)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != sel.shape:
            raise DimensionMismatch(f"weights {weights.shape} do not match point map {sel.shape}")
        sel &= weights > 0
    if np.count_nonzero(sel) < MIN_POINTS:
        raise InsufficientPoints(f"need at least {MIN_POINTS} valid points, got {np.count_nonzero(sel)}")
    rows, cols = np.nonzero(sel)
    pts = coords[sel]
    u = pts[:, :2] / pts[:, 2:3]
    r = np.stack((cols - (pmap.width - 1) / 2.0, rows - (pmap.height - 1) / 2.0), axis=-1)
    w = np.ones(rows.size) if weights is None else weights[sel]
    return u, r, w


def reprojection_objective(f: float, u: np.ndarray, r: np.ndarray, w: np.ndarray) -> float:
    return float(w @ np.linalg.norm(r - f * u, axis=-1))


def estimate_focal(pmap: PointMap, max_iters: int = 100, tol: float = 1e-10,
                   weights: np.ndarray | None = None) -> FocalEstimate:
    """Weiszfeld iteration for ``argmin_f sum_p w_p ||r_p - f u_p||``.

    Starts from the weighted least-squares focal, then repeatedly solves the
    reweighted least-squares problem with weights ``w_p / ||r_p - f u_p||``.
    Each step cannot increase the objective.
    """
    u, r, w = focal_problem(pmap, weights)
    uu = (u * u).sum(axis=-1)
    ur = (u * r).sum(axis=-1)
    if w @ uu < 1e-12:
        raise DegenerateRays("all rays lie on the principal axis; focal length is unconstrained")

    f = float((w @ ur) / (w @ uu))
    history = [reprojection_objective(f, u, r, w)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        resid = np.maximum(np.linalg.norm(r - f * u, axis=-1), W_FLOOR)
        c = w / resid
        f_new = float((c @ ur) / (c @ uu))
        history.append(reprojection_objective(f_new, u, r, w))
        step = abs(f_new - f)
        f = f_new
        if step <= tol * abs(f):
            converged = True
            break
    if f <= 0:
        raise DegenerateRays(f"recovered non-positive focal length {f}")
    return FocalEstimate(f, it, history[-1], converged, tuple(history))
