"""End-to-end CLI pipeline on a miniature run directory."""

import csv
import hashlib
import json
import os

import numpy as np
import pytest

from eo1 import cli, metrics, pipeline
from eo1.errors import DivergenceError

MINI_CFG = """
# miniature end-to-end run on the default 64x128 grid
seed = 0
steps = 6
window.cells = 32
window.stride = 32
tok.width = 32
tok.depth = 1
tok.heads = 2
tok.steps = 12
tok.batch_size = 4
tok.erosion_radius = 0
insitu.width = 32
insitu.knn_k = 4
insitu.max_obs = 32
mmae.dim = 32
mmae.depth = 1
mmae.heads = 2
mmae.steps = 12
mmae.batch_windows = 2
forecast.dim = 32
forecast.depth = 1
forecast.heads = 2
forecast.steps = 12
invert.width = 32
invert.depth = 1
invert.heads = 2
invert.steps = 10
eval.rollout_steps = 2
"""


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    out = str(root / "run")
    cfg_path = str(root / "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(MINI_CFG)
    for stage in ("gen", "train-tok", "train-mmae", "train-forecast",
                  "train-invert", "eval", "plot"):
        rc = cli.main([stage, "--out", out, "--config", cfg_path])
        assert rc == 0, f"stage {stage} failed"
    return out


def test_parser_lists_all_stages():
    parser = cli.build_parser()
    subs = parser._subparsers._group_actions[0].choices
    assert sorted(subs) == sorted(pipeline.STAGES)
    assert len(pipeline.STAGES) == 8


def test_dataset_layout(mini_run):
    ds = pipeline.dataset_dir(mini_run)
    man = json.load(open(os.path.join(ds, "manifest.json")))
    ids = [m["instrument_id"] for m in man["modalities"]]
    assert ids == ["geo0", "leo0", "insitu", "precip_proxy"]
    kinds = {m["instrument_id"]: m["kind"] for m in man["modalities"]}
    assert kinds == {"geo0": "swath", "leo0": "swath", "insitu": "stations",
                     "precip_proxy": "product"}
    assert man["dims"]["h"] == 64 and man["dims"]["steps"] == 6


def test_checkpoints_exist(mini_run):
    for name in ("tok_leo0", "tok_geo0", "insitu_enc", "insitu_dec",
                 "mmae", "forecast", "invert"):
        assert os.path.isfile(pipeline.ckpt_path(mini_run, name)), name


def test_trace_headers_are_exact(mini_run):
    want = {
        "tok_leo0": "step,recon,kl,total",
        "tok_geo0": "step,recon,kl,total",
        "mmae": "step,recon,insitu,total",
        "forecast": "step,loss",
        "invert": "step,loss",
    }
    for name, header in want.items():
        path = pipeline.trace_path(mini_run, name)
        with open(path) as fh:
            first = fh.readline().strip()
            rows = list(csv.reader(fh))
        assert first == header, name
        assert len(rows) >= 10
        for row in rows:
            assert len(row) == len(header.split(","))
            float(row[1])


def test_stage_manifests_verify(mini_run):
    stages = ("gen", "train-tok", "train-mmae", "train-forecast",
              "train-invert", "eval", "plot")
    for stage in stages:
        path = os.path.join(mini_run, "manifests", f"{stage}.json")
        man = json.load(open(path))
        assert man["stage"] == stage
        assert man["config"]["tok.erosion_radius"] == 0
        for entry in man["inputs"] + man["outputs"]:
            target = os.path.join(mini_run, entry["path"])
            if os.path.isdir(target):
                target = os.path.join(target, "manifest.json")
            digest = hashlib.sha256(open(target, "rb").read()).hexdigest()
            assert digest == entry["sha256"], (stage, entry["path"])
        raw = open(path).read()
        assert "timestamp" not in raw and "date" not in raw


def test_metrics_report_contents(mini_run):
    report = metrics.MetricReport.read(os.path.join(mini_run, "metrics.json"))
    assert np.isfinite(report.forecast["model_mse"])
    assert np.isfinite(report.forecast["persistence_mse"])
    assert report.station["overall"] is not None
    assert len(report.skill) > 0
    for row in report.skill:
        assert 0.0 <= row["miss"] <= 1.0
        assert 0.0 <= row["false_alarm"] <= 1.0
        assert row["lead_hours"] > 0.0
    assert report.extra["rollout_steps"] >= 1


def test_forecast_dataset_is_flagged(mini_run):
    man = json.load(
        open(os.path.join(mini_run, "forecast_dataset", "manifest.json"))
    )
    assert man["extra"]["forecast"] is True
    assert len(man["extra"]["lead_time_hours"]) >= 1
    ids = [m["instrument_id"] for m in man["modalities"]]
    assert "leo0" in ids and "geo0" in ids


def test_plots_have_sibling_csvs(mini_run):
    plots = os.path.join(mini_run, "plots")
    pngs = sorted(f for f in os.listdir(plots) if f.endswith(".png"))
    assert pngs
    for png in pngs:
        sib = png[:-4] + ".csv"
        assert os.path.isfile(os.path.join(plots, sib)), png


def test_gen_manifest_bytes_are_deterministic(tmp_path):
    cfg_path = str(tmp_path / "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(MINI_CFG)
    outs = []
    for sub in ("a", "b"):
        out = str(tmp_path / sub)
        assert cli.main(["gen", "--out", out, "--config", cfg_path]) == 0
        outs.append(open(os.path.join(out, "dataset", "manifest.json"), "rb").read())
    assert outs[0] == outs[1]


def test_seed_override_changes_dataset(tmp_path):
    cfg_path = str(tmp_path / "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(MINI_CFG)
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert cli.main(["gen", "--out", out_a, "--config", cfg_path]) == 0
    assert cli.main(["gen", "--out", out_b, "--config", cfg_path,
                     "--seed", "9"]) == 0
    man_a = json.load(open(os.path.join(out_a, "dataset", "manifest.json")))
    man_b = json.load(open(os.path.join(out_b, "dataset", "manifest.json")))
    assert man_a["seed"] == 0 and man_b["seed"] == 9
    assert man_a["modalities"][0]["files"] != man_b["modalities"][0]["files"]


def test_exit_code_two_on_validation_errors(tmp_path, capsys):
    rc = cli.main(["gen", "--out", str(tmp_path / "x"),
                   "--config", str(tmp_path / "missing.cfg")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
    bad = str(tmp_path / "bad.cfg")
    with open(bad, "w") as fh:
        fh.write("no.such.key = 1\n")
    rc = cli.main(["gen", "--out", str(tmp_path / "y"), "--config", bad])
    assert rc == 2
    rc = cli.main(["plot", "--out", str(tmp_path / "empty")])
    assert rc == 2


def test_exit_code_three_on_divergence(tmp_path, monkeypatch, capsys):
    def boom(stage, cfg, out_dir):
        raise DivergenceError("loss went non-finite")

    monkeypatch.setattr(cli, "run_stage", boom)
    rc = cli.main(["train-tok", "--out", str(tmp_path / "z")])
    assert rc == 3
    assert "divergence:" in capsys.readouterr().err
