import json
from pathlib import Path

from mflq.cli import main

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run(argv):
    return main([str(a) for a in argv])


def test_riccati_stage_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert run(["riccati", "--scenario", SCENARIOS / "scalar_tanh.toml", "--out", out]) == 0
    body = (out / "riccati.csv").read_text().splitlines()
    assert body[0].startswith("t,sigma_00,gamma_00")
    assert len(body) == 202
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "riccati"
    assert "riccati_s" in manifest["timings"]


def test_phi_stage(tmp_path):
    out = tmp_path / "run"
    assert run(["phi", "--scenario", SCENARIOS / "scalar_tanh.toml", "--out", out]) == 0
    header = (out / "phi.csv").read_text().splitlines()[0]
    assert header.startswith("t,mean_phi_0,mean_beta_0")


def test_simulate_stage_and_summary(tmp_path):
    out = tmp_path / "run"
    assert run(["simulate", "--scenario", SCENARIOS / "smoke2d.toml", "--paths", 500,
                "--dump-paths", 3, "--out", out]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["paths"] == 500
    assert summary["terminal_max_error"] == 0.0
    assert summary["stationarity_residual"] <= 1e-10
    paths_body = (out / "paths.csv").read_text().splitlines()
    assert len(paths_body) == 1 + 3 * 201


def test_verify_exits_zero_on_valid_scenario(tmp_path, capsys):
    out = tmp_path / "run"
    code = run(["verify", "--scenario", SCENARIOS / "scalar_tanh.toml", "--paths", 2000,
                "--tol-profile", "smoke", "--out", out])
    captured = capsys.readouterr().out
    assert code == 0, captured
    assert "PASS" in captured
    payload = json.loads((out / "verify.json").read_text())
    assert all(c["passed"] for c in payload["checks"])


def test_validation_failure_names_clause(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(
        """
[dimensions]
n = 1
m = 1
[grid]
t0 = 0.0
T = 1.0
steps = 10
[weights]
R2 = 0.1
delta = 0.5
[terminal]
kind = "deterministic"
a = [0.0]
"""
    )
    code = run(["riccati", "--scenario", bad, "--out", tmp_path / "o"])
    assert code == 2
    err = capsys.readouterr().err
    assert "R2" in err


def test_malformed_scenario_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(
        """
[dimensions]
n = 2
m = 2
[grid]
t0 = 0.0
T = 1.0
steps = 10
[coefficients]
B = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
[weights]
R2 = [[1.0, 0.0], [0.0, 1.0]]
delta = 0.5
[terminal]
kind = "deterministic"
a = [0.0, 0.0]
"""
    )
    code = run(["riccati", "--scenario", bad, "--out", tmp_path / "o"])
    assert code == 2
    assert "coefficients.B" in capsys.readouterr().err


def test_missing_scenario_file(tmp_path, capsys):
    assert run(["riccati", "--scenario", tmp_path / "nope.toml", "--out", tmp_path / "o"]) == 2


def test_report_requires_artifacts(tmp_path, capsys):
    assert run(["report", "--out", tmp_path / "empty"]) == 2
    assert "missing artifacts" in capsys.readouterr().err


def test_report_renders_run(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["simulate", "--scenario", SCENARIOS / "scalar_tanh.toml", "--paths", 200,
                "--dump-paths", 0, "--out", out]) == 0
    capsys.readouterr()
    assert run(["report", "--out", out]) == 0
    text = capsys.readouterr().out
    assert "J_mc" in text


def test_rerun_produces_byte_identical_csv(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "--scenario", SCENARIOS / "smoke2d.toml", "--paths", 300,
            "--seed", 42, "--dump-paths", 5]
    assert run(args + ["--out", out1]) == 0
    assert run(args + ["--out", out2]) == 0
    for name in ("ensemble_summary.csv", "paths.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
