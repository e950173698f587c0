"""Pinhole camera model, rigid transforms and point cloud <-> depth conversion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyCloud,
    InvalidIntrinsics,
    UnknownSceneKind,
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DepthGrid:
    """Per-pixel metric depth along the camera z-axis with a validity mask.

    ``depth`` and ``mask`` are (height, width) arrays. Invalid pixels are
    stored as 0.0 so two grids with equal content are bitwise identical.
    """

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        depth = np.array(self.depth, dtype=np.float64)
        mask = np.asarray(self.mask)
        if depth.ndim != 2:
            raise DimensionMismatch(f"depth must be 2-D, got shape {depth.shape}")
        if mask.shape != depth.shape:
            raise DimensionMismatch(f"mask shape {mask.shape} != depth shape {depth.shape}")
        if mask.dtype != bool:
            if not np.isin(mask, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")
            mask = mask.astype(bool)
        else:
            mask = mask.copy()
        valid = depth[mask]
        if not (np.isfinite(valid).all() and (valid > 0).all()):
            raise ValueError("valid pixels must hold finite, positive depth")
        depth[~mask] = 0.0
        object.__setattr__(self, "depth", _frozen(depth))
        object.__setattr__(self, "mask", _frozen(mask))

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> DepthGrid:
        """Build a grid treating non-finite and non-positive entries as invalid."""
        depth = np.asarray(depth, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            mask = np.isfinite(depth) & (depth > 0)
        return cls(np.where(mask, depth, 0.0), mask)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    def equals(self, other: DepthGrid) -> bool:
        return np.array_equal(self.mask, other.mask) and np.array_equal(self.depth, other.depth)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        values = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in values):
            raise InvalidIntrinsics(f"non-finite intrinsics {values}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsics(f"image size must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsics(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> CameraIntrinsics:
        """Unit aspect ratio with the principal point at the image center."""
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict[str, Any]:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CameraIntrinsics:
        try:
            return cls(
                float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                int(d["width"]), int(d["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidIntrinsics(f"malformed intrinsics {d!r}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps sensor-frame points into the camera frame: ``x_c = R @ x_s + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("transform entries must be finite")
        if not np.allclose(rot.T @ rot, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self) -> dict[str, Any]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RigidTransform:
        return cls(np.asarray(d["rotation"], dtype=np.float64), np.asarray(d["translation"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class PointMap:
    """Camera-frame 3-D coordinates per pixel, shape (height, width, 3)."""

    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if coords.ndim != 3 or coords.shape[2] != 3 or mask.shape != coords.shape[:2]:
            raise DimensionMismatch(f"coords {coords.shape} / mask {mask.shape} are inconsistent")
        sel = coords[mask]
        if not (np.isfinite(sel).all() and (sel[:, 2] > 0).all()):
            raise ValueError("valid points must be finite with positive z")
        coords[~mask] = 0.0
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


def project_points(cloud: PointCloud, pose: RigidTransform, cam: CameraIntrinsics) -> DepthGrid:
    """Z-buffer a sensor-frame cloud into a depth grid.

    Pixel (col, row) covers continuous image coordinates ``[col - 0.5, col + 0.5)``,
    i.e. integer coordinates are pixel centers. Among points landing in the same
    pixel the smallest depth wins; exact ties keep the earliest point.
    """
    if not isinstance(cam, CameraIntrinsics):
        raise InvalidIntrinsics("cam must be a CameraIntrinsics")
    if len(cloud) == 0:
        raise EmptyCloud("cannot project an empty point cloud")

    pts = pose.apply(cloud.points)
    z = pts[:, 2]
    keep = z > 0
    order = np.flatnonzero(keep)
    pts, z = pts[keep], z[keep]
    u = cam.fx * pts[:, 0] / z + cam.cx
    v = cam.fy * pts[:, 1] / z + cam.cy
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    inside = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    col, row, z, order = col[inside].astype(np.int64), row[inside].astype(np.int64), z[inside], order[inside]

    depth = np.zeros((cam.height, cam.width))
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if z.size:
        flat = row * cam.width + col
        # primary key: pixel, then depth, then input order
        idx = np.lexsort((order, z, flat))
        flat_sorted = flat[idx]
        first = np.ones(flat_sorted.size, dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        winners = idx[first]
        depth.flat[flat[winners]] = z[winners]
        mask.flat[flat[winners]] = True
    return DepthGrid(depth, mask)


def unproject_depth(grid: DepthGrid, cam: CameraIntrinsics) -> PointMap:
    if (grid.width, grid.height) != (cam.width, cam.height):
        raise DimensionMismatch(
            f"grid is {grid.width}x{grid.height} but camera is {cam.width}x{cam.height}"
        )
    rows, cols = np.indices(grid.shape, dtype=np.float64)
    d = grid.depth
    coords = np.stack(((cols - cam.cx) * d / cam.fx, (rows - cam.cy) * d / cam.fy, d), axis=-1)
    return PointMap(coords, grid.mask)


def depth_to_cloud(grid: DepthGrid, cam: CameraIntrinsics) -> PointCloud:
    """Valid pixels of ``grid`` as a camera-frame point cloud (row-major order)."""
    pmap = unproject_depth(grid, cam)
    return PointCloud(pmap.coords[pmap.mask])


# --------------------------------------------------------------------------
# synthetic scenes with closed-form depth


@dataclass(frozen=True)
class SceneSpec:
    """Descriptor for :func:`make_synthetic_scene`.

    kind: ``"plane"`` (params ``distance``), ``"sphere"`` (``center``, ``radius``)
    or ``"box-room"`` (``half_width``, ``half_height``, ``front``).
    ``occluded`` extra points per pixel are placed behind the visible surface
    to exercise the z-buffer; ``random_pose`` expresses the cloud in a random
    sensor frame.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    width: int = 64
    height: int = 48
    focal: float = 500.0
    occluded: int = 1
    random_pose: bool = True

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SceneSpec:
        d = dict(d)
        kind = d.pop("kind")
        known = {"width", "height", "focal", "occluded", "random_pose"}
        kwargs = {k: d.pop(k) for k in list(d) if k in known}
        params = d.pop("params", {})
        params = {**params, **d}
        return cls(kind=kind, params=params, **kwargs)


_SCENE_DEFAULTS = {
    "plane": {"distance": 10.0},
    "sphere": {"center": (0.0, 0.0, 5.0), "radius": 1.0},
    "box-room": {"half_width": 0.4, "half_height": 0.3, "front": 8.0},
}


def _ray_depths(kind: str, params: Mapping[str, Any], rx: np.ndarray, ry: np.ndarray) -> np.ndarray:
    """Depth (z) where the ray (rx, ry, 1) first hits the surface; NaN on a miss."""
    if kind == "plane":
        dist = float(params["distance"])
        if dist <= 0:
            raise ValueError("plane distance must be positive")
        return np.full(rx.shape, dist)
    if kind == "sphere":
        c = np.asarray(params["center"], dtype=np.float64)
        r = float(params["radius"])
        # |t*ray - c|^2 = r^2 with ray = (rx, ry, 1); z of the hit equals t
        a = rx * rx + ry * ry + 1.0
        b = -2.0 * (rx * c[0] + ry * c[1] + c[2])
        cc = c @ c - r * r
        disc = b * b - 4.0 * a * cc
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        q = -0.5 * (b - root)  # stable form; b < 0 for spheres in front of the camera
        t_near = cc / q
        out = np.where(disc >= 0, t_near, np.nan)
        return np.where(out > 0, out, np.nan)
    if kind == "box-room":
        hw, hh, front = float(params["half_width"]), float(params["half_height"]), float(params["front"])
        with np.errstate(divide="ignore"):
            tx = np.where(rx != 0, hw / np.abs(rx), np.inf)
            ty = np.where(ry != 0, hh / np.abs(ry), np.inf)
        return np.minimum(np.minimum(tx, ty), front)
    raise UnknownSceneKind(f"unknown scene kind {kind!r}")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # re-orthonormalize to keep det/orthogonality within 1e-12
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def random_transform(rng: np.random.Generator, scale: float = 2.0) -> RigidTransform:
    return RigidTransform(_random_rotation(rng), rng.uniform(-scale, scale, size=3))


def make_synthetic_scene(
    seed: int, spec: SceneSpec | Mapping[str, Any]
) -> tuple[PointCloud, RigidTransform, CameraIntrinsics, DepthGrid]:
    """Cloud, sensor-to-camera pose, camera and the closed-form depth grid.

    One surface point is generated on the ray through every pixel center, plus
    ``spec.occluded`` farther points on the same ray; the cloud is shuffled
    and expressed in the sensor frame.
    """
    if not isinstance(spec, SceneSpec):
        spec = SceneSpec.from_dict(spec)
    if spec.kind not in _SCENE_DEFAULTS:
        raise UnknownSceneKind(f"unknown scene kind {spec.kind!r}")
    params = {**_SCENE_DEFAULTS[spec.kind], **dict(spec.params)}
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics.centered(spec.focal, spec.width, spec.height)

    rows, cols = np.indices((cam.height, cam.width), dtype=np.float64)
    rx = (cols - cam.cx) / cam.fx
    ry = (rows - cam.cy) / cam.fy
    z = _ray_depths(spec.kind, params, rx, ry)
    hit = np.isfinite(z)
    analytic = DepthGrid(np.where(hit, z, 0.0), hit)

    zs = z[hit]
    rxs, rys = rx[hit], ry[hit]
    layers = [zs]
    for _ in range(spec.occluded):
        layers.append(zs * rng.uniform(1.05, 2.0, size=zs.shape))
    zz = np.concatenate(layers)
    rxx = np.tile(rxs, len(layers))
    ryy = np.tile(rys, len(layers))
    cam_pts = np.stack((rxx * zz, ryy * zz, zz), axis=-1)
    cam_pts = cam_pts[rng.permutation(cam_pts.shape[0])]

    pose = random_transform(rng) if spec.random_pose else RigidTransform.identity()
    sensor_pts = pose.inverse().apply(cam_pts)
    return PointCloud(sensor_pts), pose, cam, analytic
