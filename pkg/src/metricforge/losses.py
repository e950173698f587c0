"""Training objectives with analytic per-pixel gradients.

Every loss has a batched core ``_*_maps(pred, gt, mask, ...)`` where ``pred``
is (B, H, W) and ``gt``/``mask`` are (H, W). Cores return the loss value per
batch item, the gradient with respect to ``pred`` and an integer *signature*
of the active piecewise-linear region (signs, drop set, median positions).
Two inputs with equal signatures lie on the same smooth piece, which is what
the finite-difference checker uses to skip stencils that straddle a kink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Union

import numpy as np
from scipy.ndimage import correlate1d

from .errors import EmptyMask, EmptyOverlap, NonPositiveDepth, UnknownLoss
from .geometry import DepthGrid

MapLike = Union[DepthGrid, np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 15.0
    beta: float = 5.0
    gamma: float = 10.0
    delta: float = 2.0
    drop_fraction: float = 0.20
    scale_count: int = 6
    balance_c: float = 400.0
    mad_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.drop_fraction < 1:
            raise ValueError("drop_fraction must lie in [0, 1)")
        if self.scale_count < 1:
            raise ValueError("scale_count must be >= 1")
        if not self.balance_c > 1:
            raise ValueError("balance_c must exceed 1")
        if not self.mad_epsilon > 0:
            raise ValueError("mad_epsilon must be positive")


@dataclass(frozen=True, eq=False)
class LossReport:
    value: float
    gradient: np.ndarray
    active_mask: np.ndarray


def _as_map(m: MapLike) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(m, DepthGrid):
        return m.depth, m.mask
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {arr.shape}")
    return arr, np.isfinite(arr)


def _joint(pred: MapLike, gt: MapLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p, mp = _as_map(pred)
    g, mg = _as_map(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    mask = mp & mg
    if not mask.any():
        raise EmptyOverlap("prediction and ground truth share no valid pixel")
    return np.where(mask, p, 0.0), np.where(mask, g, 0.0), mask


def drop_count(n: int, fraction: float) -> int:
    """``ceil(fraction * n)``, computed exactly and capped so one pixel survives."""
    k = math.ceil(Fraction(fraction).limit_denominator(10**9) * n)
    return min(k, n - 1)


# --------------------------------------------------------------------------
# elementwise transforms


def to_inverse_depth(grid: DepthGrid) -> DepthGrid:
    valid = grid.depth[grid.mask]
    if (valid <= 0).any():
        raise NonPositiveDepth("inverse depth needs positive depths")
    return DepthGrid(np.where(grid.mask, 1.0 / np.where(grid.mask, grid.depth, 1.0), 0.0), grid.mask)


def dlog_transform(d, cfg: LossConfig | None = None):
    """Distance-balanced log depth ``1 - ln(d) / ln(C)``; accepts scalars or arrays."""
    cfg = cfg or LossConfig()
    arr = np.asarray(d, dtype=np.float64)
    if not (arr > 0).all():
        raise NonPositiveDepth("log-space transform needs positive depths")
    out = 1.0 - np.log(arr) / math.log(cfg.balance_c)
    return float(out) if np.ndim(d) == 0 else out


# --------------------------------------------------------------------------
# robust MAE


def _robust_mae_maps(p, g, mask, fraction):
    pv = p[..., mask]
    gv = g[mask]
    n = gv.size
    k = drop_count(n, fraction)
    diff = pv - gv
    err = np.abs(diff)
    keep = np.ones(err.shape, dtype=bool)
    if k:
        # drop everything above the k-th largest error, then fill the remaining
        # slots from the tie group at that error in pixel-index order
        thr = -np.partition(-err, k - 1, axis=-1)[..., k - 1:k]
        above = err > thr
        tied = err == thr
        room = k - above.sum(axis=-1, keepdims=True)
        keep = ~(above | (tied & (np.cumsum(tied, axis=-1) <= room)))
    n_keep = n - k
    value = (err * keep).sum(axis=-1) / n_keep
    gv_grad = np.sign(diff) * keep / n_keep
    grad = np.zeros(p.shape)
    grad[..., mask] = gv_grad
    sig = np.concatenate((np.sign(diff).astype(np.int8), keep.astype(np.int8)), axis=-1)
    active = np.zeros(p.shape, dtype=bool)
    active[..., mask] = keep
    return value, grad, sig, active


def robust_mae(pred: MapLike, gt: MapLike, cfg: LossConfig | None = None) -> LossReport:
    """Mean absolute error after discarding the largest ``drop_fraction`` of errors."""
    cfg = cfg or LossConfig()
    p, g, mask = _joint(pred, gt)
    value, grad, _, active = _robust_mae_maps(p[None], g, mask, cfg.drop_fraction)
    return LossReport(float(value[0]), grad[0], active[0])


# --------------------------------------------------------------------------
# MAD normalization


def _median_positions(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n % 2:
        return np.array([n // 2]), np.array([1.0])
    return np.array([n // 2 - 1, n // 2]), np.array([0.5, 0.5])


def _mad_forward(vals: np.ndarray, eps: float):
    """Normalize the last axis by median / floored MAD; returns values and a cache."""
    n = vals.shape[-1]
    pos, wts = _median_positions(n)
    mid = np.argpartition(vals, pos, axis=-1)[..., pos]
    med = (np.take_along_axis(vals, mid, axis=-1) * wts).sum(axis=-1)
    dev = vals - med[..., None]
    absdev = np.abs(dev)
    mid_a = np.argpartition(absdev, pos, axis=-1)[..., pos]
    mad = (np.take_along_axis(absdev, mid_a, axis=-1) * wts).sum(axis=-1)
    floored = mad < eps
    s = np.where(floored, eps, mad)
    cache = (wts, mid, mid_a, dev, s, floored)
    return dev / s[..., None], cache


def _mad_backward(upstream: np.ndarray, cache) -> np.ndarray:
    wts, mid, mid_a, dev, s, floored = cache
    dmed = np.zeros(dev.shape)
    np.put_along_axis(dmed, mid, wts, axis=-1)
    s_ = s[..., None]
    grad = upstream / s_ - upstream.sum(axis=-1, keepdims=True) / s_ * dmed
    sg = np.sign(np.take_along_axis(dev, mid_a, axis=-1)) * wts
    dmad = np.zeros(dev.shape)
    np.put_along_axis(dmad, mid_a, sg, axis=-1)
    dmad -= sg.sum(axis=-1, keepdims=True) * dmed
    dmad[floored] = 0.0
    grad -= (upstream * dev).sum(axis=-1, keepdims=True) / (s_ * s_) * dmad
    return grad


def _mad_signature(cache) -> np.ndarray:
    _, mid, mid_a, _, _, floored = cache
    return np.concatenate(
        (np.sort(mid, axis=-1), np.sort(mid_a, axis=-1), floored[..., None].astype(np.int64)), axis=-1
    )


def mad_normalize(m: MapLike, cfg: LossConfig | None = None) -> np.ndarray:
    """``(m - median) / max(MAD, mad_epsilon)`` over valid pixels; invalid pixels are 0."""
    cfg = cfg or LossConfig()
    vals, mask = _as_map(m)
    if not mask.any():
        raise EmptyMask("cannot normalize a map with no valid pixel")
    norm, _ = _mad_forward(vals[mask], cfg.mad_epsilon)
    out = np.zeros(vals.shape)
    out[mask] = norm
    return out


# --------------------------------------------------------------------------
# multi-scale Scharr gradient loss

_BINOMIAL = np.array([1.0, 2.0, 1.0]) / 4.0
_SCHARR_SMOOTH = np.array([3.0, 10.0, 3.0]) / 16.0
_CENTRAL = np.array([-1.0, 0.0, 1.0])


def _sl(axis: int, s: slice) -> tuple:
    return (Ellipsis, s) if axis == -1 else (Ellipsis, s, slice(None))


def _filter1d(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """3-tap correlation along ``axis`` (-1 or -2) with replicate padding."""
    return correlate1d(x, taps, axis=axis, mode="nearest")


def _filter1d_adjoint(g: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    # transpose of _filter1d: taps mirrored, replicated border folded onto the edges
    out = taps[1] * g
    if taps[0]:
        out[_sl(axis, slice(None, -1))] += taps[0] * g[_sl(axis, slice(1, None))]
        out[_sl(axis, slice(0, 1))] += taps[0] * g[_sl(axis, slice(0, 1))]
    if taps[2]:
        out[_sl(axis, slice(1, None))] += taps[2] * g[_sl(axis, slice(None, -1))]
        out[_sl(axis, slice(-1, None))] += taps[2] * g[_sl(axis, slice(-1, None))]
    return out


def _blur(x):
    return _filter1d(_filter1d(x, _BINOMIAL, -1), _BINOMIAL, -2)


def _blur_adjoint(g):
    return _filter1d_adjoint(_filter1d_adjoint(g, _BINOMIAL, -2), _BINOMIAL, -1)


def _scharr(x):
    """(d/dx, d/dy) with the 3x3 Scharr pair: (3, 10, 3)/16 smoothing times [-1, 0, 1]."""
    gx = _filter1d(_filter1d(x, _SCHARR_SMOOTH, -2), _CENTRAL, -1)
    gy = _filter1d(_filter1d(x, _SCHARR_SMOOTH, -1), _CENTRAL, -2)
    return gx, gy


def _scharr_adjoint(gx, gy):
    return (_filter1d_adjoint(_filter1d_adjoint(gx, _CENTRAL, -1), _SCHARR_SMOOTH, -2)
            + _filter1d_adjoint(_filter1d_adjoint(gy, _CENTRAL, -2), _SCHARR_SMOOTH, -1))


def _pyramid_masks(mask: np.ndarray, scale_count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-level (pixel mask, gradient mask); levels stop before dropping under 2x2.

    A coarse pixel is valid iff its four children are; a gradient is valid iff
    its whole 3x3 Scharr stencil is.
    """
    levels = []
    m = mask
    for j in range(scale_count):
        if j:
            h, w = m.shape[0] // 2, m.shape[1] // 2
            if h < 2 or w < 2:
                break
            m = (m[0:2 * h:2, 0:2 * w:2] & m[1:2 * h:2, 0:2 * w:2]
                 & m[0:2 * h:2, 1:2 * w:2] & m[1:2 * h:2, 1:2 * w:2])
        elif m.shape[0] < 2 or m.shape[1] < 2:
            break
        pm = np.pad(m, 1, mode="edge")
        h, w = m.shape
        gm = np.ones(m.shape, dtype=bool)
        for a in range(3):
            for b in range(3):
                gm &= pm[a:a + h, b:b + w]
        levels.append((m, gm))
    return levels


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    return _blur(x)[..., 0:2 * h:2, 0:2 * w:2]


def _downsample_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    up = np.zeros(g.shape[:-2] + shape)
    h, w = g.shape[-2:]
    up[..., 0:2 * h:2, 0:2 * w:2] = g
    return _blur_adjoint(up)


def _multiscale_gradient_maps(p, g, mask, scale_count, need_grad=True):
    """L1 multi-scale Scharr gradient difference; ``p`` (B,H,W), ``g`` (H,W).

    Blur, decimation and Scharr are linear, so the pyramid of ``p - g`` is the
    difference of the two pyramids.
    """
    levels = _pyramid_masks(mask, scale_count)
    batch = p.shape[:-2]
    level = p - g
    terms = []
    for j, (_, gm) in enumerate(levels):
        if j:
            level = _downsample(level)
        n_j = int(gm.sum())
        if n_j == 0:
            terms.append(None)
            continue
        dx, dy = _scharr(level)
        terms.append((gm, n_j, dx, dy))

    used = [t for t in terms if t is not None]
    if not used:
        grad = np.zeros(p.shape) if need_grad else None
        return np.zeros(batch), grad, np.zeros(batch + (0,), dtype=np.int64)

    value = np.zeros(batch)
    sigs = []
    for gm, n_j, dx, dy in used:
        ax, ay = dx[..., gm], dy[..., gm]
        value += (np.abs(ax).sum(axis=-1) + np.abs(ay).sum(axis=-1)) / n_j
        sigs += [np.sign(ax).astype(np.int8), np.sign(ay).astype(np.int8)]
    value /= len(used)
    sig = np.concatenate(sigs, axis=-1)
    if not need_grad:
        return value, None, sig

    grad = None
    for j in range(len(levels) - 1, -1, -1):
        shape = levels[j][0].shape
        grad = np.zeros(batch + shape) if grad is None else _downsample_adjoint(grad, shape)
        if terms[j] is not None:
            gm, n_j, dx, dy = terms[j]
            w = gm / (n_j * len(used))
            grad = grad + _scharr_adjoint(np.sign(dx) * w, np.sign(dy) * w)
    return value, grad, sig


def _ssi_maps(p, g, mask, cfg: LossConfig, need_grad=True):
    pn_v, pcache = _mad_forward(p[..., mask], cfg.mad_epsilon)
    gn_v, _ = _mad_forward(g[mask], cfg.mad_epsilon)
    pn = np.zeros(p.shape)
    pn[..., mask] = pn_v
    gn = np.zeros(g.shape)
    gn[mask] = gn_v
    value, gmap, sig = _multiscale_gradient_maps(pn, gn, mask, cfg.scale_count, need_grad)
    sig = np.concatenate((sig, _mad_signature(pcache)), axis=-1)
    if not need_grad:
        return value, None, sig
    grad = np.zeros(p.shape)
    grad[..., mask] = _mad_backward(gmap[..., mask], pcache)
    return value, grad, sig


def ssi_mage(pred: MapLike, gt: MapLike, cfg: LossConfig | None = None) -> LossReport:
    """Scale-and-shift invariant mean absolute gradient error.

    Both maps are MAD-normalized over their joint valid pixels, then compared
    through the L1 norm of 3x3 Scharr gradients on a ``scale_count``-level
    pyramid (binomial blur, 2x decimation). Levels that would be smaller than
    2x2 are dropped; with no level left the loss is 0.
    """
    cfg = cfg or LossConfig()
    p, g, mask = _joint(pred, gt)
    value, grad, _ = _ssi_maps(p[None], g, mask, cfg)
    return LossReport(float(value[0]), grad[0], mask)


# --------------------------------------------------------------------------
# composite objectives


def _teacher_maps(p, g, mask, cfg: LossConfig, synthetic: bool, need_grad=True):
    safe = np.where(mask, p, 1.0)
    inv_p = np.where(mask, 1.0 / safe, 0.0)
    inv_g = np.where(mask, 1.0 / np.where(mask, g, 1.0), 0.0)
    v_mae, g_mae, s_mae, active = _robust_mae_maps(inv_p, inv_g, mask, cfg.drop_fraction)
    value = cfg.alpha * v_mae
    grad_inv = cfg.alpha * g_mae
    sig = s_mae
    if synthetic:
        v_ssi, g_ssi, s_ssi = _ssi_maps(inv_p, inv_g, mask, cfg, need_grad)
        value = value + cfg.beta * v_ssi
        if need_grad:
            grad_inv = grad_inv + cfg.beta * g_ssi
        sig = np.concatenate((sig, s_ssi), axis=-1)
        active = np.broadcast_to(mask, p.shape)
    if not need_grad:
        return value, None, sig, active
    grad = np.where(mask, -grad_inv / (safe * safe), 0.0)
    return value, grad, sig, active


def _check_positive(p, g, mask) -> None:
    if (p[..., mask] <= 0).any() or (g[mask] <= 0).any():
        raise NonPositiveDepth("depth maps must be positive on valid pixels")


def teacher_loss(pred: MapLike, gt: MapLike, cfg: LossConfig | None = None,
                 synthetic: bool = True) -> LossReport:
    """Weighted robust MAE plus (synthetic data only) SSI-MAGE, in inverse depth.

    The gradient is taken with respect to the metric depth prediction.
    """
    cfg = cfg or LossConfig()
    p, g, mask = _joint(pred, gt)
    _check_positive(p, g, mask)
    value, grad, _, active = _teacher_maps(p[None], g, mask, cfg, synthetic)
    return LossReport(float(value[0]), grad[0], np.array(active[0]))


def _student_maps(p, g, mask, cfg: LossConfig, need_grad=True):
    log_c = math.log(cfg.balance_c)
    safe = np.where(mask, p, 1.0)
    lp = np.where(mask, 1.0 - np.log(safe) / log_c, 0.0)
    lg = np.where(mask, 1.0 - np.log(np.where(mask, g, 1.0)) / log_c, 0.0)
    n = int(mask.sum())
    diff = lp[..., mask] - lg[mask]
    value = cfg.gamma * np.abs(diff).sum(axis=-1) / n
    grad_l = np.zeros(p.shape)
    grad_l[..., mask] = cfg.gamma * np.sign(diff) / n
    v_ssi, g_ssi, s_ssi = _ssi_maps(lp, lg, mask, cfg, need_grad)
    value = value + cfg.delta * v_ssi
    sig = np.concatenate((np.sign(diff).astype(np.int8), s_ssi), axis=-1)
    if not need_grad:
        return value, None, sig
    grad_l += cfg.delta * g_ssi
    grad = np.where(mask, -grad_l / (safe * log_c), 0.0)
    return value, grad, sig


def student_loss(pred: MapLike, gt: MapLike, cfg: LossConfig | None = None) -> LossReport:
    """Distance-balanced log-depth L1 plus SSI-MAGE on the log-depth maps."""
    cfg = cfg or LossConfig()
    p, g, mask = _joint(pred, gt)
    _check_positive(p, g, mask)
    value, grad, _ = _student_maps(p[None], g, mask, cfg)
    return LossReport(float(value[0]), grad[0], mask)


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass(frozen=True)
class GradcheckResult:
    loss: str
    max_rel_error: float
    checked: int
    excluded: int


def _instance_inverse(rng, shape):
    pred = rng.uniform(0.05, 2.0, shape)
    gt = rng.uniform(0.05, 2.0, shape)
    return pred, gt


def _instance_depth(lo, hi, log_uniform):
    def make(rng, shape):
        if log_uniform:
            draw = lambda: np.exp(rng.uniform(np.log(lo), np.log(hi), shape))  # noqa: E731
        else:
            draw = lambda: rng.uniform(lo, hi, shape)  # noqa: E731
        return draw(), draw()
    return make


# name -> (batched core returning (value, grad, sig), instance generator)
_REGISTRY: dict[str, tuple[Callable, Callable]] = {
    "robust_mae": (lambda p, g, m, c, ng=True: _robust_mae_maps(p, g, m, c.drop_fraction)[:3],
                   _instance_inverse),
    "ssi_mage": (_ssi_maps, _instance_inverse),
    "teacher_loss": (lambda p, g, m, c, ng=True: _teacher_maps(p, g, m, c, True, ng)[:3],
                     _instance_depth(0.5, 80.0, True)),
    "teacher_loss_real": (lambda p, g, m, c, ng=True: _teacher_maps(p, g, m, c, False, ng)[:3],
                          _instance_depth(0.5, 80.0, True)),
    "student_loss": (_student_maps, _instance_depth(0.5, 300.0, False)),
}

LOSS_NAMES = tuple(_REGISTRY)


def check_gradient(name: str, shape: tuple[int, int] = (32, 32), seed: int = 0,
                   step: float = 1e-5, cfg: LossConfig | None = None,
                   invalid_fraction: float = 0.1, chunk: int = 512) -> GradcheckResult:
    """Compare the analytic gradient with central differences at every valid pixel.

    Pixels whose stencil ``x +- step`` changes the loss signature (a sign flip,
    a change of the drop set or of the median elements) sit on a kink and are
    excluded. The relative error at a pixel is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * max|numeric|)``.
    """
    if name not in _REGISTRY:
        raise UnknownLoss(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")
    cfg = cfg or LossConfig()
    core, make = _REGISTRY[name]
    rng = np.random.default_rng(seed)
    pred, gt = make(rng, shape)
    mask = rng.random(shape) >= invalid_fraction
    pred, gt = np.where(mask, pred, 0.0), np.where(mask, gt, 0.0)

    _, grad, sig0 = core(pred[None], gt, mask, cfg)
    grad = grad[0]
    pix = np.flatnonzero(mask)
    numeric = np.zeros(pix.size)
    kink = np.zeros(pix.size, dtype=bool)
    for start in range(0, pix.size, chunk):
        sel = pix[start:start + chunk]
        b = sel.size
        batch = np.repeat(pred[None], 2 * b, axis=0).reshape(2 * b, -1)
        batch[np.arange(b), sel] += step
        batch[b + np.arange(b), sel] -= step
        vals, _, sigs = core(batch.reshape((2 * b,) + shape), gt, mask, cfg, False)
        numeric[start:start + b] = (vals[:b] - vals[b:]) / (2 * step)
        kink[start:start + b] = (sigs[:b] != sig0).any(axis=-1) | (sigs[b:] != sig0).any(axis=-1)

    analytic = grad.flat[pix]
    ok = ~kink
    if not ok.any():
        return GradcheckResult(name, 0.0, 0, int(kink.sum()))
    a, n = analytic[ok], numeric[ok]
    floor = 1e-3 * np.abs(n).max()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    denom[denom == 0] = 1.0
    return GradcheckResult(name, float((np.abs(a - n) / denom).max()), int(ok.sum()), int(kink.sum()))


def gradcheck(name: str, shape: tuple[int, int] = (32, 32), seed: int = 0, step: float = 1e-5) -> float:
    """Maximum relative discrepancy between analytic and finite-difference gradients."""
    return check_gradient(name, shape, seed, step).max_rel_error
