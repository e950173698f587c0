"""Depth map, prompt and point cloud file formats.

Depth formats, chosen by extension:

* ``.png``  16-bit grayscale, millimeters, 0 = invalid
* ``.pfm``  32-bit float, meters, non-finite = invalid (written as NaN)
* ``.raw``  little-endian float32 meters with a ``<name>.raw.json`` sidecar
  ``{"width", "height", "dtype": "<f4", "mask": "<name>.mask"}``; the mask
  file holds one byte (0/1) per pixel, row-major.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthGrid, PointCloud
from .prompting import SparsePrompt

DEPTH_SUFFIXES = (".png", ".pfm", ".raw")
PNG_SCALE = 1000.0  # millimeters per meter


def read_depth(path: str | Path) -> DepthGrid:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return read_png16(path)
    if suffix == ".pfm":
        depth = read_pfm(path)
        if depth.ndim != 2:
            raise ValueError(f"{path}: expected a single-channel PFM")
        return DepthGrid.from_depth(depth)
    if suffix == ".raw":
        return read_raw(path)
    raise ValueError(f"{path}: unsupported depth format (use one of {', '.join(DEPTH_SUFFIXES)})")


def write_depth(path: str | Path, grid: DepthGrid) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        write_png16(path, grid)
    elif suffix == ".pfm":
        write_pfm(path, np.where(grid.mask, grid.depth, np.nan))
    elif suffix == ".raw":
        write_raw(path, grid)
    else:
        raise ValueError(f"{path}: unsupported depth format (use one of {', '.join(DEPTH_SUFFIXES)})")


# -- 16-bit PNG ------------------------------------------------------------


def read_png16(path: Path) -> DepthGrid:
    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise ValueError(f"{path}: expected a 16-bit grayscale PNG, got mode {img.mode}")
    raw = np.asarray(img).astype(np.float64)
    mask = raw > 0
    return DepthGrid(np.where(mask, raw / PNG_SCALE, 0.0), mask)


def write_png16(path: Path, grid: DepthGrid) -> None:
    mm = np.rint(grid.depth * PNG_SCALE)
    valid_mm = mm[grid.mask]
    if valid_mm.size and (valid_mm.max() > 65535 or valid_mm.min() < 1):
        raise ValueError(
            f"{path}: depths must lie in [0.0005, 65.535] m to be stored as 16-bit millimeters"
        )
    Image.fromarray(np.where(grid.mask, mm, 0).astype(np.uint16)).save(path)


# -- PFM -------------------------------------------------------------------


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM file into a top-to-bottom float64 array (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        header = f.readline().decode("latin-1").rstrip()
        if header == "PF":
            channels = 3
        elif header == "Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().decode("latin-1")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM header")
        width, height = map(int, m.groups())
        scale = float(f.readline().decode("latin-1").strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(), dtype=endian + "f4")
    expected = width * height * channels
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} samples, found {data.size}")
    shape = (height, width, channels) if channels == 3 else (height, width)
    # PFM stores rows bottom to top
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    elif data.ndim == 2:
        header = "Pf"
    else:
        raise ValueError("PFM data must be (H, W) or (H, W, 3)")
    height, width = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{width} {height}\n-1.0\n".encode("latin-1"))
        f.write(np.flipud(data).astype("<f4").tobytes())


# -- raw float32 + sidecar -----------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def read_raw(path: Path) -> DepthGrid:
    meta_path = _sidecar(path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        width, height = int(meta["width"]), int(meta["height"])
    except (OSError, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: unreadable sidecar {meta_path}: {exc}") from exc
    dtype = np.dtype(meta.get("dtype", "<f4"))
    depth = np.fromfile(path, dtype=dtype)
    if depth.size != width * height:
        raise ValueError(f"{path}: expected {width * height} samples, found {depth.size}")
    depth = depth.reshape(height, width).astype(np.float64)
    mask_name = meta.get("mask")
    if mask_name is None:
        return DepthGrid.from_depth(depth)
    mask = np.fromfile(path.parent / mask_name, dtype=np.uint8)
    if mask.size != width * height:
        raise ValueError(f"{path}: mask has {mask.size} entries, expected {width * height}")
    return DepthGrid(np.where(mask.reshape(height, width) == 1, depth, 0.0), mask.reshape(height, width))


def write_raw(path: Path, grid: DepthGrid) -> None:
    mask_path = path.with_name(path.stem + ".mask")
    grid.depth.astype("<f4").tofile(path)
    grid.mask.astype(np.uint8).tofile(mask_path)
    meta = {"width": grid.width, "height": grid.height, "dtype": "<f4", "mask": mask_path.name}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


# -- prompts and point clouds --------------------------------------------


def write_prompt(path: str | Path, prompt: SparsePrompt) -> None:
    """One ``x y d`` record per line; ``d`` printed with round-trip precision."""
    lines = [f"{x} {y} {d!r}" for x, y, d in prompt]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_prompt(path: str | Path) -> SparsePrompt:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'x y d', got {line!r}")
        try:
            entries.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return SparsePrompt.from_entries(entries)


def read_points(path: str | Path) -> PointCloud:
    """Point cloud from ``.npy`` (N x 3) or whitespace-separated text (one ``x y z`` per line)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return PointCloud(np.load(path))
    return PointCloud(np.loadtxt(path, dtype=np.float64, ndmin=2))


def write_points(path: str | Path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, cloud.points)
    else:
        np.savetxt(path, cloud.points, fmt="%.17g")
