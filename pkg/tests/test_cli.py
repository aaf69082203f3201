import json

import pytest

from regsob.cli import DEFAULT_CONFIG, _threads, load_config, main
from regsob.errors import ConfigError

MINI = {
    "solver": {"schedule": [8, 10], "R_max": 8.0, "max_iters": 5},
    "verify": {
        "lambda_schedule": [2.0],
        "batches": 2,
        "samples_per_batch": 2000,
        "max_rel_stderr": 1.0,
    },
    "boundary": {"alpha": [0.02, 0.02, 0.02]},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "mini.json"
    cfg.write_text(json.dumps(MINI))
    theta = str(d / "theta.rsob")
    g0 = str(d / "g0.json")
    out = str(d / "verify")
    assert main(["solve", "--config", str(cfg), "--out", theta]) == 0
    assert main(["gamma0", "--theta", theta, "--config", str(cfg), "--out", g0]) == 0
    rc = main(
        ["verify", "--theta", theta, "--gamma0", g0, "--config", str(cfg), "--out", out]
    )
    return d, cfg, theta, g0, out, rc


def test_pipeline_runs_and_writes_manifests(pipeline):
    d, cfg, theta, g0, out, rc = pipeline
    assert rc == 0
    man = json.loads((d / "verify.manifest.json").read_text())
    assert man["command"] == "verify"
    assert man["wall_time_s"] > 0
    assert {o["path"] for o in man["outputs"]} == {out + ".json", out + ".csv"}
    assert all(len(o["sha256"]) == 64 for o in man["outputs"])
    assert set(man["input_hashes"]) == {theta, g0}


def test_verify_csv_columns(pipeline):
    d = pipeline[0]
    lines = (d / "verify.csv").read_text().splitlines()
    assert lines[0] == (
        "lambda,measured_quotient,stderr,predicted_bound,"
        "curvature_term,F_term,pass"
    )
    assert len(lines) == 2
    assert lines[1].split(",")[-1] in ("0", "1")


def test_verify_verdict_failure_exit_code(pipeline, tmp_path):
    d, cfg, theta, g0, out, _ = pipeline
    bad = json.loads(open(g0).read())
    bad["value"] = 1e6
    g0bad = tmp_path / "g0bad.json"
    g0bad.write_text(json.dumps(bad))
    rc = main(
        [
            "verify",
            "--theta",
            theta,
            "--gamma0",
            str(g0bad),
            "--config",
            str(cfg),
            "--out",
            str(tmp_path / "v"),
        ]
    )
    assert rc == 2


def test_print_config_round_trips(capsys):
    assert main(["print-config"]) == 0
    assert json.loads(capsys.readouterr().out) == DEFAULT_CONFIG


def test_config_merge_and_unknown_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"solver": {"n": 3}}))
    cfg = load_config(str(p))
    assert cfg["solver"]["n"] == 3
    assert cfg["solver"]["sigma"] == 0.75
    p.write_text(json.dumps({"sliver": {}}))
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_invalid_json_reports_location(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{\n  broken\n}")
    rc = main(["solve", "--config", str(p), "--out", str(tmp_path / "x")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "line 2" in err


def test_unknown_suite_is_config_error(capsys):
    assert main(["check", "--suite", "nope"]) == 1
    assert "unknown suite" in capsys.readouterr().err


def test_thread_env_override(monkeypatch):
    monkeypatch.setenv("REGSOB_THREADS", "7")
    assert _threads({"threads": 2}) == 7
    monkeypatch.delenv("REGSOB_THREADS")
    assert _threads({"threads": 2}) == 2
