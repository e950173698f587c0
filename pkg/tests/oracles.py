"""Independent reference implementations used as test oracles.

Each is written as plainly as possible (explicit loops, sorting, bisection)
and shares no code with the package beyond its data types.
"""

import itertools
import math

import numpy as np


def brute_force_zbuffer(points, pose, cam):
    """Per-pixel scan: every pixel keeps the smallest depth of the points inside it."""
    depth = np.full((cam.height, cam.width), np.inf)
    for x, y, z in pose.apply(points).tolist():
        if z <= 0:
            continue
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
        col, row = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
        if 0 <= col < cam.width and 0 <= row < cam.height and z < depth[row, col]:
            depth[row, col] = z
    mask = np.isfinite(depth)
    return np.where(mask, depth, 0.0), mask


def sort_trim_oracle(pred, gt, fraction):
    """Sort errors, remove the ceil(fraction * N) largest (keeping one), average the rest."""
    mask = pred.mask & gt.mask
    errs = [abs(float(p) - float(g)) for p, g in zip(pred.depth[mask], gt.depth[mask])]
    n = len(errs)
    k = min(math.ceil(round(fraction * n, 9)), n - 1)
    kept = sorted(errs)[: n - k]
    return sum(kept) / len(kept)


def metrics_oracle(pred, gt):
    n = 0
    s_rel = s_sq = s_abs = s_log = 0.0
    hits = [0, 0, 0]
    for r in range(gt.height):
        for c in range(gt.width):
            if not (pred.mask[r, c] and gt.mask[r, c]):
                continue
            p, g = float(pred.depth[r, c]), float(gt.depth[r, c])
            n += 1
            s_rel += abs(p - g) / g
            s_sq += (p - g) ** 2
            s_abs += abs(p - g)
            s_log += abs(math.log10(p) - math.log10(g))
            ratio = max(p / g, g / p)
            for k in range(3):
                if ratio < 1.25 ** (k + 1):
                    hits[k] += 1
    return dict(abs_rel=s_rel / n, rmse=math.sqrt(s_sq / n), mae=s_abs / n, log10=s_log / n,
                delta1=100.0 * hits[0] / n, delta2=100.0 * hits[1] / n, delta3=100.0 * hits[2] / n)


def boundary_oracle(pred, gt, t):
    """Enumerate every ordered 4-neighbor pair of jointly valid pixels: (matched, pred, gt) counts."""
    h, w = gt.shape
    valid = pred.mask & gt.mask
    matched = n_pred = n_gt = 0
    for r, c in itertools.product(range(h), range(w)):
        for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            r2, c2 = r + dr, c + dc
            if not (0 <= r2 < h and 0 <= c2 < w and valid[r, c] and valid[r2, c2]):
                continue
            cp = pred.depth[r2, c2] / pred.depth[r, c] > 1 + t / 100
            cg = gt.depth[r2, c2] / gt.depth[r, c] > 1 + t / 100
            n_pred += cp
            n_gt += cg
            matched += cp and cg
    return matched, n_pred, n_gt


def golden_section(fn, lo, hi, tol=1e-10):
    """Golden-section minimizer of a unimodal function on [lo, hi]."""
    inv = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol * max(1.0, abs(a)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = fn(d)
    return (a + b) / 2
