"""Dataset manifests: JSON lists of per-sample input files plus camera data.

Schema (``schema_version`` 1)::

    {
      "schema_version": 1,
      "samples": [
        {
          "id": "scene-000",              # optional, [A-Za-z0-9._-]+, unique
          "gt": "gt/000.png",             # depth files (.png / .pfm / .raw)
          "pred": "pred/000.pfm",
          "prior": "prior/000.pfm",
          "prompt": "prompts/000.txt",    # "x y d" lines
          "points": "lidar/000.npy",      # sensor-frame cloud, .npy or text
          "point_map": "pmap/000.npy",    # H x W x 3 camera-frame points
          "image": "rgb/000.jpg",         # carried through, never decoded
          "intrinsics": {"fx": ..., "fy": ..., "cx": ..., "cy": ..., "width": ..., "height": ...},
          "pose": {"rotation": [[...], [...], [...]], "translation": [...]},
          "synthetic": false
        }
      ]
    }

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .errors import InvalidIntrinsics, ManifestParse, MissingInput
from .geometry import CameraIntrinsics, RigidTransform

SCHEMA_VERSION = 1
PATH_FIELDS = ("gt", "pred", "prior", "prompt", "points", "point_map", "image")
_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class Sample:
    id: str
    intrinsics: CameraIntrinsics
    gt: Optional[Path] = None
    pred: Optional[Path] = None
    prior: Optional[Path] = None
    prompt: Optional[Path] = None
    points: Optional[Path] = None
    point_map: Optional[Path] = None
    image: Optional[Path] = None
    pose: Optional[RigidTransform] = None
    synthetic: bool = False

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise MissingInput(f"sample {self.id!r} lacks required input(s): {', '.join(missing)}")


@dataclass(frozen=True)
class Manifest:
    samples: tuple[Sample, ...]
    path: Optional[Path] = None
    schema_version: int = SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.samples)


def _parse_sample(index: int, raw: Any, base: Path) -> Sample:
    if not isinstance(raw, dict):
        raise ManifestParse(f"sample {index} is not a JSON object")
    unknown = set(raw) - set(PATH_FIELDS) - {"id", "intrinsics", "pose", "synthetic"}
    if unknown:
        raise ManifestParse(f"sample {index} has unknown field(s): {', '.join(sorted(unknown))}")
    sid = str(raw.get("id", f"{index:05d}"))
    if not _ID_RE.match(sid):
        raise ManifestParse(f"sample {index}: id {sid!r} must match [A-Za-z0-9._-]+")
    if "intrinsics" not in raw:
        raise ManifestParse(f"sample {sid!r} lacks intrinsics")
    try:
        intr = CameraIntrinsics.from_dict(raw["intrinsics"])
    except InvalidIntrinsics as exc:
        raise ManifestParse(f"sample {sid!r}: {exc}") from exc
    pose = None
    if raw.get("pose") is not None:
        try:
            pose = RigidTransform.from_dict(raw["pose"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParse(f"sample {sid!r}: invalid pose: {exc}") from exc
    paths = {}
    for name in PATH_FIELDS:
        value = raw.get(name)
        if value is None:
            continue
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise MissingInput(f"sample {sid!r}: {name} file not found: {p}")
        paths[name] = p
    return Sample(id=sid, intrinsics=intr, pose=pose, synthetic=bool(raw.get("synthetic", False)), **paths)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise MissingInput(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestParse(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise ManifestParse(f"{path}: expected an object with a 'samples' list")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ManifestParse(f"{path}: unsupported schema_version {version!r}")
    base = path.parent
    samples = tuple(_parse_sample(i, s, base) for i, s in enumerate(doc["samples"]))
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ManifestParse(f"{path}: sample ids are not unique")
    return Manifest(samples, path, version)


def sample_to_dict(sample: Sample, relative_to: Path | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"id": sample.id, "intrinsics": sample.intrinsics.to_dict()}
    for name in PATH_FIELDS:
        p = getattr(sample, name)
        if p is not None:
            out[name] = str(p.relative_to(relative_to)) if relative_to else str(p)
    if sample.pose is not None:
        out["pose"] = sample.pose.to_dict()
    if sample.synthetic:
        out["synthetic"] = True
    return out


def dump_manifest(path: str | Path, samples: list[dict[str, Any]]) -> None:
    """Write a manifest document; ``samples`` are raw JSON-ready dicts."""
    doc = {"schema_version": SCHEMA_VERSION, "samples": samples}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
