import json

import numpy as np
import pytest

from metricforge.cli import DEFAULT_CONFIG, load_config, main
from metricforge.errors import ManifestParse
from metricforge.io import read_depth, read_prompt
from metricforge.manifest import dump_manifest

from conftest import build_synthetic_dataset


def run(*argv):
    return main([str(a) for a in argv])


def report(out):
    return json.loads((out / "report.json").read_text())


@pytest.fixture
def dataset(tmp_path):
    return build_synthetic_dataset(tmp_path / "data", count=3)


class TestConfig:
    def test_defaults(self):
        assert load_config(None) == DEFAULT_CONFIG

    def test_precedence(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"prompt": {"count": 10, "pdsa_neighbors": 2}}))
        cfg = load_config(tmp_path / "c.json", {"prompt": {"count": 99}})
        assert cfg["prompt"]["count"] == 99
        assert cfg["prompt"]["pdsa_neighbors"] == 2

    @pytest.mark.parametrize("doc", [{"nope": 1}, {"loss": {"kind": "sideways"}}, {"loss": {"alpha": -2}}])
    def test_rejects_bad_config(self, tmp_path, doc):
        (tmp_path / "c.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestParse):
            load_config(tmp_path / "c.json")


class TestCommands:
    def test_evaluate_identity(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run("evaluate", "--manifest", dataset, "--out", out) == 0
        agg = report(out)["aggregate"]
        assert agg["delta1"] == 100.0 and agg["abs_rel"] == 0.0

    def test_project_matches_gt(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run("project", "--manifest", dataset, "--out", out) == 0
        for entry in report(out)["samples"]:
            projected = read_depth(out / entry["result"]["output"])
            gt = read_depth(dataset.parent / f"{entry['id']}.pfm")
            assert projected.equals(gt)

    def test_prepare_identity_is_byte_exact(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run("prepare", "--manifest", dataset, "--out", out, "--prompt-count", 500) == 0
        for entry in report(out)["samples"]:
            gt_bytes = (dataset.parent / f"{entry['id']}.pfm").read_bytes()
            outputs = entry["result"]["outputs"]
            assert (out / outputs["pdsa"]).read_bytes() == gt_bytes
            assert (out / outputs["gmdr"]).read_bytes() == gt_bytes
            assert len(read_prompt(out / outputs["prompt"])) == 500
            assert np.load(out / outputs["stack"]).shape == (48, 64, 3)

    def test_sample_prompt_band(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run("sample-prompt", "--manifest", dataset, "--out", out) == 0
        for entry in report(out)["samples"]:
            assert 2000 <= entry["result"]["requested"] <= 40000

    def test_calib_recovers_focal(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run("calib", "--manifest", dataset, "--out", out) == 0
        rep = report(out)
        assert rep["aggregate"]["relative_error_max"] < 1e-6
        assert all(e["result"]["source"] == "pred" for e in rep["samples"])

    @pytest.mark.parametrize("kind", ["teacher", "student"])
    def test_loss_identity(self, dataset, tmp_path, kind):
        out = tmp_path / "out"
        assert run("loss", "--manifest", dataset, "--out", out, "--loss-kind", kind) == 0
        assert report(out)["aggregate"]["mean_value"] == 0.0

    def test_boundary_thresholds(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run("boundary", "--manifest", dataset, "--out", out, "--thresholds", 10, 20) == 0
        assert [r["t"] for r in report(out)["aggregate"]["records"]] == [10.0, 20.0]

    def test_gradcheck(self, tmp_path):
        out = tmp_path / "out"
        assert run("gradcheck", "--out", out, "--instances", 1, "--losses", "robust_mae", "student_loss") == 0
        agg = report(out)["aggregate"]
        assert agg["robust_mae"]["passed"] and agg["student_loss"]["passed"]

    @pytest.mark.parametrize("fmt", ["png", "raw"])
    def test_output_formats(self, dataset, tmp_path, fmt):
        out = tmp_path / "out"
        assert run("project", "--manifest", dataset, "--out", out, "--format", fmt) == 0
        assert report(out)["samples"][0]["result"]["output"].endswith("." + fmt)


class TestDeterminismAndExitCodes:
    def test_fixed_clock_reports_identical(self, dataset, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["prepare", "--manifest", dataset, "--seed", 7, "--fixed-clock", "--prompt-count", 300]
        assert run(*args, "--out", a) == 0
        assert run(*args, "--out", b, "--jobs", 3) == 0
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        for entry in report(a)["samples"]:
            p = entry["result"]["outputs"]["prompt"]
            assert (a / p).read_bytes() == (b / p).read_bytes()

    def test_partial_failure(self, dataset, tmp_path):
        doc = json.loads(dataset.read_text())
        del doc["samples"][1]["pred"]
        dump_manifest(dataset, doc["samples"])
        out = tmp_path / "out"
        assert run("evaluate", "--manifest", dataset, "--out", out) == 2
        rep = report(out)
        assert rep["summary"] == {"failed": 1, "ok": 2, "total": 3}
        assert rep["samples"][1]["error"]["type"] == "MissingInput"
        assert run("evaluate", "--manifest", dataset, "--out", out, "--strict") == 1

    def test_constant_prior_fails_per_sample(self, tmp_path):
        manifest = build_synthetic_dataset(tmp_path / "data", count=2, kinds=("plane", "sphere"))
        out = tmp_path / "out"
        assert run("prepare", "--manifest", manifest, "--out", out, "--prompt-count", 50) == 2
        assert report(out)["samples"][0]["error"]["type"] == "DegenerateFit"

    def test_fatal(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text("{not json")
        assert run("evaluate", "--manifest", tmp_path / "m.json", "--out", tmp_path) == 1
        assert "invalid JSON" in capsys.readouterr().err

    def test_manifest_required(self, tmp_path):
        assert run("evaluate", "--out", tmp_path) == 1
