import csv
import json
import subprocess
import sys

import pytest

from convmove.cli import main

SINGLE = """
[kernels]
m_single = 80
[simulate]
n = 80
m = 80
proc_var = 0.04
warp_center = 0.5
[mcmc]
n_phi = 10
iterations = 400
burn_in = 100
thin = 2
ratio_sd_upper = 40
top_k = 2
[warp]
n_centers = 5
n_scales = 2
n_magnitudes = 2
[bma]
second_stage_iterations = 300
[gp]
n_draws = 120
n_pred = 20
[cli_io]
xy_km = true
standardize = false
rescale_time = false
"""

NETWORK = """
[kernels]
m_group = 25
[simulate]
kind = group
n = 20
n_individuals = 3
proc_var = 0.5
latent_m = 5
latent_positions = 0 0 0 0 3 0
[network]
latent_m = 5
sigma_z = 2
iterations = 60
burn_in = 30
holdout = 1:0.4:0.6
[gp]
n_pred = 8
[cli_io]
xy_km = true
standardize = false
rescale_time = false
"""


def _run(run_dir, cfg, *cmds, extra=()):
    for cmd in cmds:
        argv = [cmd, "--config", str(cfg), "--run-dir", str(run_dir), *extra]
        if cmd in ("fit", "fit-network"):
            argv += ["--input", str(run_dir / "telemetry.csv")]
        assert main(argv) == 0, cmd


def _csv_bytes(run_dir):
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in sorted(run_dir.rglob("*.csv"))}


@pytest.fixture(scope="module")
def single_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("single")
    cfg = base / "c.ini"
    cfg.write_text(SINGLE)
    runs = []
    for name in ("a", "b"):
        run = base / name
        _run(run, cfg, "simulate", "fit", "bma", "predict", "report")
        runs.append(run)
    return cfg, runs


@pytest.fixture(scope="module")
def network_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("net")
    cfg = base / "c.ini"
    cfg.write_text(NETWORK)
    run = base / "r"
    _run(run, cfg, "simulate", "fit-network", "degree", "report")
    return run


def test_single_pipeline_outputs(single_runs):
    _, (run, _) = single_runs
    with open(run / "bma_probs.csv") as fh:
        probs = [float(r["prob"]) for r in csv.DictReader(fh)]
    assert len(probs) == 3 and sum(probs) == pytest.approx(1.0, abs=1e-12)
    for name in ("predictions.csv", "warp_derivative.csv", "report/warp_derivative.svg",
                 "report/trajectory.svg", "chains/model_000.csv"):
        assert (run / name).exists(), name
    doc = json.loads((run / "manifest_predict.json").read_text())
    assert "predictions.csv" in doc["outputs"]
    assert doc["seed"] == 0


def test_single_pipeline_deterministic(single_runs):
    _, (a, b) = single_runs
    ca, cb = _csv_bytes(a), _csv_bytes(b)
    assert ca.keys() == cb.keys() and len(ca) > 10
    for k in ca:
        assert ca[k] == cb[k], k
    for svg in sorted((a / "report").glob("*.svg")):
        assert svg.read_bytes() == (b / "report" / svg.name).read_bytes()


def test_bma_single_candidate(tmp_path, single_runs):
    cfg = tmp_path / "one.ini"
    cfg.write_text(SINGLE.replace("top_k = 2", "top_k = 1\ninclude_unwarped = false"))
    _run(tmp_path, cfg, "simulate", "fit", "bma")
    with open(tmp_path / "bma_probs.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and float(rows[0]["prob"]) == 1.0


def test_network_report_has_degree_per_individual(network_run):
    deg = sorted(p.name for p in (network_run / "report").glob("degree_*.csv"))
    assert deg == ["degree_1.csv", "degree_2.csv", "degree_3.csv"]
    with open(network_run / "degree.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["individual"] for r in rows} == {"1", "2", "3"}
    assert all(0.0 <= float(r["mean"]) <= 2.0 for r in rows)
    assert (network_run / "report" / "uncertainty.csv").exists()


def test_missing_input(tmp_path, capsys):
    assert main(["fit", "--run-dir", str(tmp_path), "--input", str(tmp_path / "nope.csv")]) == 2
    assert "not found" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[mcmc]\nburnin = 3\n")
    assert main(["simulate", "--config", str(cfg), "--run-dir", str(tmp_path)]) == 2
    assert "mcmc.burnin" in capsys.readouterr().err


def test_report_needs_results(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path)]) == 2


def test_run_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CONVMOVE_RUN_DIR", str(tmp_path / "env"))
    cfg = tmp_path / "c.ini"
    cfg.write_text("[simulate]\nn = 10\nm = 20\n")
    out = subprocess.run([sys.executable, "-m", "convmove", "simulate", "--config", str(cfg)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "env" / "telemetry.csv").exists()
