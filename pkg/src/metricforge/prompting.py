"""Sparse metric prompts: sampling, and the three-channel preparation pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .alignment import lsq_scale_shift, pixelwise_scale_field
from .errors import DimensionMismatch, NoValidPixels
from .geometry import DepthGrid, _frozen

# lower bound for GMDR output, meters
GMDR_FLOOR = 1e-3
# default sampling band for the number of prompt points per image
PROMPT_BAND = (2000, 40000)
PDSA_NEIGHBORS = 4


@dataclass(frozen=True, eq=False)
class SparsePrompt:
    """Ordered ``(x, y, d)`` triplets: pixel column, pixel row, metric depth."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=np.int64).reshape(-1)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        d = np.array(self.d, dtype=np.float64).reshape(-1)
        if not (x.size == y.size == d.size):
            raise ValueError("x, y and d must have equal length")
        if (x < 0).any() or (y < 0).any():
            raise ValueError("prompt pixel coordinates must be non-negative")
        if not (np.isfinite(d).all() and (d > 0).all()):
            raise ValueError("prompt depths must be finite and positive")
        if x.size:
            key = y * (int(x.max()) + 1) + x
            if np.unique(key).size != key.size:
                raise ValueError("duplicate prompt pixels")
        for name, arr in (("x", x), ("y", y), ("d", d)):
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, int, float]]) -> SparsePrompt:
        entries = list(entries)
        if not entries:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0))
        x, y, d = zip(*entries)
        return cls(np.asarray(x), np.asarray(y), np.asarray(d))

    def __len__(self) -> int:
        return self.x.size

    def __iter__(self) -> Iterator[tuple[int, int, float]]:
        return zip(self.x.tolist(), self.y.tolist(), self.d.tolist())

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(self)

    def check_bounds(self, width: int, height: int) -> None:
        if len(self) and (self.x.max() >= width or self.y.max() >= height):
            raise DimensionMismatch(f"prompt pixels fall outside a {width}x{height} image")

    def mask(self, width: int, height: int) -> np.ndarray:
        self.check_bounds(width, height)
        m = np.zeros((height, width), dtype=bool)
        m[self.y, self.x] = True
        return m


@dataclass(frozen=True, eq=False)
class PreparedPrompt:
    pdsa_channel: np.ndarray
    gmdr_channel: np.ndarray
    mask_channel: np.ndarray

    def __post_init__(self) -> None:
        if not (self.pdsa_channel.shape == self.gmdr_channel.shape == self.mask_channel.shape):
            raise DimensionMismatch("prepared channels must share a shape")

    @property
    def height(self) -> int:
        return self.mask_channel.shape[0]

    @property
    def width(self) -> int:
        return self.mask_channel.shape[1]

    def stack(self) -> np.ndarray:
        """H x W x 3 array in channel order (PDSA, GMDR, mask)."""
        return np.stack(
            (self.pdsa_channel, self.gmdr_channel, self.mask_channel.astype(np.float64)), axis=-1
        )


def sample_prompt(grid: DepthGrid, n: int, seed: int) -> SparsePrompt:
    """Uniformly sample ``n`` valid pixels without replacement (all of them if fewer).

    Entries come back in row-major pixel order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if grid.mask.all():
        n_valid = grid.mask.size
        valid = None
    else:
        valid = np.flatnonzero(grid.mask)
        n_valid = valid.size
    if n_valid == 0:
        raise NoValidPixels("depth grid has no valid pixels")
    rng = np.random.default_rng(seed)
    if n >= n_valid:
        pick = np.arange(n_valid)
    else:
        pick = np.sort(rng.choice(n_valid, size=n, replace=False))
    flat = pick if valid is None else valid[pick]
    y, x = np.divmod(flat, grid.width)
    return SparsePrompt(x, y, grid.depth.flat[flat])


def sample_prompt_count(seed: int, band: tuple[int, int] = PROMPT_BAND) -> int:
    """Draw a prompt size uniformly from the inclusive integer ``band``."""
    lo, hi = band
    return int(np.random.default_rng(seed).integers(lo, hi, endpoint=True))


def pdsa_refine(prompt: SparsePrompt, prior: DepthGrid, k: int = PDSA_NEIGHBORS) -> DepthGrid:
    """Pixel-wise depth scale alignment of ``prior`` to the prompt depths."""
    field = pixelwise_scale_field(prior, prompt, k=k)
    out = prior.depth * field.scale
    hit = prior.mask[prompt.y, prompt.x]
    out[prompt.y[hit], prompt.x[hit]] = prompt.d[hit]
    return DepthGrid(out, prior.mask)


def gmdr_correct(prompt: SparsePrompt, prior: DepthGrid, floor: float = GMDR_FLOOR) -> DepthGrid:
    """Global scale-and-shift recovery of ``prior`` from the prompt depths."""
    fit = lsq_scale_shift(prior, prompt)
    out = np.maximum(fit.apply(prior.depth), floor)
    return DepthGrid(out, prior.mask)


def prepare_prompt(prompt: SparsePrompt, prior: DepthGrid, k: int = PDSA_NEIGHBORS) -> PreparedPrompt:
    pdsa = pdsa_refine(prompt, prior, k=k)
    gmdr = gmdr_correct(prompt, prior)
    return PreparedPrompt(
        _frozen(pdsa.depth), _frozen(gmdr.depth), _frozen(prompt.mask(prior.width, prior.height))
    )
