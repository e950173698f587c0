"""Command line entry point: ``metricforge <command> [options]``.

Every command except ``gradcheck`` walks a manifest, processes samples
(optionally in parallel) and writes ``<out>/report.json``. Exit status is 0
on full success, 2 when some samples failed and 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .alignment import lsq_scale_shift
from .calibration import estimate_focal
from .errors import DimensionMismatch, ManifestParse, MetricForgeError, MissingInput, WriteFailure
from .geometry import DepthGrid, PointMap, RigidTransform, project_points, unproject_depth
from .io import read_depth, read_points, read_prompt, write_depth, write_prompt
from .losses import LOSS_NAMES, LossConfig, check_gradient, student_loss, teacher_loss
from .manifest import Manifest, Sample, load_manifest
from .metrics import (
    BoundaryRecord,
    BoundaryReport,
    MetricsReport,
    boundary_f1,
    depth_metrics,
    fov_error,
    merge_boundary,
    merge_metrics,
)
from .prompting import PROMPT_BAND, prepare_prompt, sample_prompt, sample_prompt_count

log = logging.getLogger("metricforge")

REPORT_SCHEMA_VERSION = 1
FIXED_CLOCK = "1970-01-01T00:00:00+00:00"
GRADCHECK_TOLERANCE = 1e-4
COMMANDS = ("project", "sample-prompt", "prepare", "loss", "evaluate", "boundary", "calib", "gradcheck")

DEFAULT_CONFIG: dict[str, Any] = {
    "loss": {
        "kind": "teacher",
        "alpha": 15.0,
        "beta": 5.0,
        "gamma": 10.0,
        "delta": 2.0,
        "drop_fraction": 0.2,
        "scale_count": 6,
        "balance_c": 400.0,
        "mad_epsilon": 1e-6,
    },
    "prompt": {"count": None, "band": list(PROMPT_BAND), "pdsa_neighbors": 4},
    "boundary": {"thresholds": [5.0, 10.0, 15.0, 20.0, 25.0]},
    "calib": {"max_iters": 100, "tol": 1e-10, "source": "auto"},
    "output": {"depth_format": "pfm"},
    "gradcheck": {
        "losses": ["robust_mae", "ssi_mage", "teacher_loss", "student_loss"],
        "shape": [32, 32],
        "instances": 20,
        "step": 1e-5,
    },
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ManifestParse(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ManifestParse(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON config file, then command-line overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise MissingInput(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ManifestParse(f"{path}: invalid JSON: {exc}") from exc
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    if cfg["loss"]["kind"] not in ("teacher", "student"):
        raise ManifestParse(f"loss.kind must be 'teacher' or 'student', got {cfg['loss']['kind']!r}")
    loss_config(cfg)
    return cfg


def loss_config(cfg: dict) -> LossConfig:
    params = {k: v for k, v in cfg["loss"].items() if k != "kind"}
    try:
        return LossConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ManifestParse(f"invalid loss config: {exc}") from exc


def sample_seed(seed: int, index: int) -> int:
    """Independent per-sample seed, stable regardless of job scheduling."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --------------------------------------------------------------------------
# per-sample commands


@dataclass
class Context:
    cfg: dict
    seed: int
    out: Path

    def sample_dir(self, sample: Sample) -> Path:
        d = self.out / sample.id
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise WriteFailure(f"cannot create {d}: {exc}") from exc
        return d

    def rel(self, path: Path) -> str:
        """Output path as recorded in reports: relative to the output directory."""
        return path.relative_to(self.out).as_posix()

    @property
    def depth_suffix(self) -> str:
        return "." + self.cfg["output"]["depth_format"].lstrip(".")


def _write_depth(ctx: Context, path: Path, grid: DepthGrid) -> str:
    try:
        write_depth(path, grid)
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc
    return ctx.rel(path)


def _check_camera(grid: DepthGrid, sample: Sample, what: str) -> None:
    cam = sample.intrinsics
    if (grid.width, grid.height) != (cam.width, cam.height):
        raise DimensionMismatch(
            f"sample {sample.id!r}: {what} is {grid.width}x{grid.height}, intrinsics say {cam.width}x{cam.height}"
        )


def cmd_project(ctx: Context, sample: Sample, seed: int) -> dict:
    sample.require("points")
    cloud = read_points(sample.points)
    grid = project_points(cloud, sample.pose or RigidTransform.identity(), sample.intrinsics)
    path = ctx.sample_dir(sample) / ("depth" + ctx.depth_suffix)
    return {"points": len(cloud), "valid_pixels": grid.valid_count, "output": _write_depth(ctx, path, grid)}


def _prompt_count(ctx: Context, seed: int) -> int:
    count = ctx.cfg["prompt"]["count"]
    if count is None:
        lo, hi = ctx.cfg["prompt"]["band"]
        return sample_prompt_count(seed, (int(lo), int(hi)))
    return int(count)


def cmd_sample_prompt(ctx: Context, sample: Sample, seed: int) -> dict:
    sample.require("gt")
    gt = read_depth(sample.gt)
    n = _prompt_count(ctx, seed)
    prompt = sample_prompt(gt, n, seed)
    path = ctx.sample_dir(sample) / "prompt.txt"
    try:
        write_prompt(path, prompt)
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc
    return {"requested": n, "count": len(prompt), "output": ctx.rel(path)}


def cmd_prepare(ctx: Context, sample: Sample, seed: int) -> dict:
    sample.require("prior")
    prior = read_depth(sample.prior)
    if sample.prompt is not None:
        prompt = read_prompt(sample.prompt)
        source = "file"
    elif sample.gt is not None:
        prompt = sample_prompt(read_depth(sample.gt), _prompt_count(ctx, seed), seed)
        source = "sampled-from-gt"
    else:
        raise MissingInput(f"sample {sample.id!r} needs a prompt file or a gt depth to sample from")
    prepared = prepare_prompt(prompt, prior, k=int(ctx.cfg["prompt"]["pdsa_neighbors"]))
    fit = lsq_scale_shift(prior, prompt)
    d = ctx.sample_dir(sample)
    sfx = ctx.depth_suffix
    outputs = {
        "pdsa": _write_depth(ctx, d / ("pdsa" + sfx), DepthGrid(prepared.pdsa_channel, prior.mask)),
        "gmdr": _write_depth(ctx, d / ("gmdr" + sfx), DepthGrid(prepared.gmdr_channel, prior.mask)),
    }
    try:
        np.save(d / "prepared.npy", prepared.stack())
        write_prompt(d / "prompt.txt", prompt)
    except OSError as exc:
        raise WriteFailure(f"cannot write into {d}: {exc}") from exc
    outputs["stack"] = ctx.rel(d / "prepared.npy")
    outputs["prompt"] = ctx.rel(d / "prompt.txt")
    return {
        "prompt_source": source,
        "prompt_count": len(prompt),
        "mask_count": int(prepared.mask_channel.sum()),
        "gmdr_fit": {"scale": fit.scale, "shift": fit.shift, "residual_rms": fit.residual_rms,
                     "sample_count": fit.sample_count},
        "outputs": outputs,
    }


def cmd_loss(ctx: Context, sample: Sample, seed: int) -> dict:
    sample.require("pred", "gt")
    pred, gt = read_depth(sample.pred), read_depth(sample.gt)
    lcfg = loss_config(ctx.cfg)
    kind = ctx.cfg["loss"]["kind"]
    if kind == "teacher":
        rep = teacher_loss(pred, gt, lcfg, synthetic=sample.synthetic)
    else:
        rep = student_loss(pred, gt, lcfg)
    return {"kind": kind, "synthetic": sample.synthetic, "value": rep.value,
            "active_pixels": int(rep.active_mask.sum())}


def cmd_evaluate(ctx: Context, sample: Sample, seed: int) -> dict:
    sample.require("pred", "gt")
    return depth_metrics(read_depth(sample.pred), read_depth(sample.gt)).to_dict()


def cmd_boundary(ctx: Context, sample: Sample, seed: int) -> dict:
    sample.require("pred", "gt")
    rep = boundary_f1(read_depth(sample.pred), read_depth(sample.gt), ctx.cfg["boundary"]["thresholds"])
    return rep.to_dict()


def _load_point_map(path: Path) -> PointMap:
    coords = np.load(path)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ValueError(f"{path}: point map must be H x W x 3, got {coords.shape}")
    with np.errstate(invalid="ignore"):
        mask = np.isfinite(coords).all(axis=-1) & (coords[..., 2] > 0)
    return PointMap(np.where(mask[..., None], coords, 0.0), mask)


def cmd_calib(ctx: Context, sample: Sample, seed: int) -> dict:
    source = ctx.cfg["calib"]["source"]
    order = ("point_map", "pred", "gt") if source == "auto" else (source,)
    chosen = next((name for name in order if getattr(sample, name) is not None), None)
    if chosen is None:
        raise MissingInput(f"sample {sample.id!r} has none of: {', '.join(order)}")
    if chosen == "point_map":
        pmap = _load_point_map(sample.point_map)
    else:
        grid = read_depth(getattr(sample, chosen))
        _check_camera(grid, sample, chosen)
        pmap = unproject_depth(grid, sample.intrinsics)
    est = estimate_focal(pmap, int(ctx.cfg["calib"]["max_iters"]), float(ctx.cfg["calib"]["tol"]))
    gt_focal = sample.intrinsics.fx
    return {
        "source": chosen,
        **est.to_dict(),
        "gt_focal": gt_focal,
        "relative_error": abs(est.focal - gt_focal) / gt_focal,
        "fov_error_deg": fov_error(est.focal, gt_focal, pmap.width),
    }


SAMPLE_COMMANDS: dict[str, Callable[[Context, Sample, int], dict]] = {
    "project": cmd_project,
    "sample-prompt": cmd_sample_prompt,
    "prepare": cmd_prepare,
    "loss": cmd_loss,
    "evaluate": cmd_evaluate,
    "boundary": cmd_boundary,
    "calib": cmd_calib,
}


def aggregate(command: str, results: list[dict]) -> dict:
    if not results:
        return {}
    if command == "evaluate":
        return merge_metrics(MetricsReport(**r) for r in results).to_dict()
    if command == "boundary":
        reports = [BoundaryReport(tuple(BoundaryRecord(**rec) for rec in r["records"])) for r in results]
        return merge_boundary(reports).to_dict()
    if command == "calib":
        errs = [r["fov_error_deg"] for r in results]
        rel = [r["relative_error"] for r in results]
        return {"fov_error_mean_deg": statistics.fmean(errs), "fov_error_median_deg": statistics.median(errs),
                "relative_error_max": max(rel), "count": len(results)}
    if command == "loss":
        vals = [r["value"] for r in results]
        return {"mean_value": statistics.fmean(vals), "count": len(vals)}
    if command == "project":
        return {"valid_pixels": sum(r["valid_pixels"] for r in results), "count": len(results)}
    if command == "sample-prompt":
        return {"prompt_points": sum(r["count"] for r in results), "count": len(results)}
    if command == "prepare":
        return {"prompt_points": sum(r["prompt_count"] for r in results), "count": len(results)}
    return {}


# --------------------------------------------------------------------------
# driver


class StrictAbort(MetricForgeError):
    pass


def _run_one(ctx: Context, command: str, index: int, sample: Sample) -> dict:
    entry: dict[str, Any] = {"index": index, "id": sample.id}
    try:
        entry["result"] = SAMPLE_COMMANDS[command](ctx, sample, sample_seed(ctx.seed, index))
        entry["status"] = "ok"
    except (MetricForgeError, ValueError, OSError) as exc:
        log.warning("sample %s failed: %s", sample.id, exc)
        entry["status"] = "error"
        entry["error"] = {"type": type(exc).__name__, "message": str(exc)}
    return entry


def run_manifest(command: str, manifest: Manifest | None, cfg: dict, seed: int, out: Path,
                 jobs: int = 1, strict: bool = False) -> dict:
    """Run ``command`` over every sample; returns the report (without clock fields)."""
    ctx = Context(cfg, seed, out)
    if command == "gradcheck":
        entries = _run_gradcheck(ctx)
    else:
        if manifest is None:
            raise MissingInput(f"command {command!r} needs --manifest")
        samples = list(enumerate(manifest.samples))
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                entries = list(pool.map(lambda item: _run_one(ctx, command, *item), samples))
        else:
            entries = [_run_one(ctx, command, i, s) for i, s in samples]
    ok = [e["result"] for e in entries if e["status"] == "ok"]
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool": {"name": "metricforge", "version": __version__},
        "command": command,
        "seed": seed,
        "config": cfg,
        "samples": entries,
        "aggregate": _aggregate_gradcheck(entries) if command == "gradcheck" else aggregate(command, ok),
        "summary": {"total": len(entries), "ok": len(ok), "failed": len(entries) - len(ok)},
    }
    if strict and len(ok) != len(entries):
        first = next(e for e in entries if e["status"] != "ok")
        raise StrictAbort(f"sample {first['id']!r} failed under --strict", report)
    return report


def _run_gradcheck(ctx: Context) -> list[dict]:
    gc = ctx.cfg["gradcheck"]
    lcfg = loss_config(ctx.cfg)
    entries = []
    for name in gc["losses"]:
        for i in range(int(gc["instances"])):
            seed = sample_seed(ctx.seed, i)
            entry: dict[str, Any] = {"index": len(entries), "id": f"{name}-{i}"}
            try:
                res = check_gradient(name, tuple(gc["shape"]), seed, float(gc["step"]), lcfg)
            except MetricForgeError as exc:
                entry.update(status="error", error={"type": type(exc).__name__, "message": str(exc)})
            else:
                passed = res.max_rel_error < GRADCHECK_TOLERANCE
                entry.update(
                    status="ok" if passed else "failed",
                    result={"loss": name, "seed": seed, "max_rel_error": res.max_rel_error,
                            "checked": res.checked, "excluded": res.excluded, "passed": passed},
                )
            entries.append(entry)
    return entries


def _aggregate_gradcheck(entries: list[dict]) -> dict:
    out: dict[str, Any] = {}
    for e in entries:
        if "result" not in e:
            continue
        r = e["result"]
        agg = out.setdefault(r["loss"], {"max_rel_error": 0.0, "instances": 0, "passed": True})
        agg["max_rel_error"] = max(agg["max_rel_error"], r["max_rel_error"])
        agg["instances"] += 1
        agg["passed"] = agg["passed"] and r["passed"]
    return out


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_report(path: Path, report: dict) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise WriteFailure(f"cannot write report {path}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, help="dataset manifest (JSON)")
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="samples processed in parallel")
    common.add_argument("--strict", action="store_true", help="abort on the first per-sample failure")
    common.add_argument("--fixed-clock", action="store_true", help="zero timestamps for reproducible reports")
    common.add_argument("--out", type=Path, default=Path("metricforge-out"), help="output directory")
    common.add_argument("--format", dest="depth_format", choices=("pfm", "png", "raw"),
                        help="depth output format")

    parser = argparse.ArgumentParser(prog="metricforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"metricforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("project", parents=[common], help="project point clouds into depth maps")
    sp = sub.add_parser("sample-prompt", parents=[common], help="sample sparse metric prompts from gt depth")
    sp.add_argument("--prompt-count", type=int, help="points per image (default: uniform in the band)")
    pp = sub.add_parser("prepare", parents=[common], help="build PDSA / GMDR / mask prompt channels")
    pp.add_argument("--prompt-count", type=int, help="points per image when sampling from gt")
    lp = sub.add_parser("loss", parents=[common], help="evaluate the training losses")
    lp.add_argument("--loss-kind", choices=("teacher", "student"))
    sub.add_parser("evaluate", parents=[common], help="depth accuracy metrics")
    bp = sub.add_parser("boundary", parents=[common], help="occluding-contour boundary F1")
    bp.add_argument("--thresholds", type=float, nargs="+", help="contour thresholds in percent")
    sub.add_parser("calib", parents=[common], help="recover focal lengths from point maps")
    gp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of loss gradients")
    gp.add_argument("--losses", nargs="+", choices=LOSS_NAMES)
    gp.add_argument("--instances", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    o: dict[str, Any] = {}
    if args.depth_format:
        o["output"] = {"depth_format": args.depth_format}
    if getattr(args, "prompt_count", None) is not None:
        o["prompt"] = {"count": args.prompt_count}
    if getattr(args, "loss_kind", None):
        o["loss"] = {"kind": args.loss_kind}
    if getattr(args, "thresholds", None):
        o["boundary"] = {"thresholds": args.thresholds}
    gc = {}
    if getattr(args, "losses", None):
        gc["losses"] = args.losses
    if getattr(args, "instances", None) is not None:
        gc["instances"] = args.instances
    if gc:
        o["gradcheck"] = gc
    return o


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("METRICFORGE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    started = time.monotonic()
    started_at = FIXED_CLOCK if args.fixed_clock else datetime.now(timezone.utc).isoformat()
    report_path = args.out / "report.json"
    try:
        cfg = load_config(args.config, _overrides(args))
        manifest = load_manifest(args.manifest) if args.manifest else None
        try:
            report = run_manifest(args.command, manifest, cfg, args.seed, args.out,
                                  jobs=max(1, args.jobs), strict=args.strict)
            code = 0 if report["summary"]["failed"] == 0 else 2
        except StrictAbort as exc:
            report, code = exc.args[1], 1
            log.error("%s", exc.args[0])
        report["manifest"] = str(args.manifest) if args.manifest else None
        report["started_at"] = started_at
        report["duration_seconds"] = 0.0 if args.fixed_clock else round(time.monotonic() - started, 6)
        write_report(report_path, report)
    except MetricForgeError as exc:
        print(f"metricforge: error: {exc}", file=sys.stderr)
        return 1
    s = report["summary"]
    print(f"{args.command}: {s['ok']}/{s['total']} ok -> {report_path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
