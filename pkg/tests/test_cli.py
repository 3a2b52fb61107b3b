import csv
import json

import pytest

from xmtf.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from tests.test_experiments import TINY


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_unknown_verb_prints_usage(capsys):
    assert main(["fly"]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_missing_verb():
    assert main([]) == EXIT_CONFIG


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lam": 3.0}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["train", "--trials", "0"]) == EXIT_CONFIG


def test_train_eval_and_curves(config, tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--config", config, "--out", out, "--trials", "1", "--seed", "2"]) == EXIT_OK
    resolved = json.load(open(tmp_path / "run" / "config.json"))
    assert resolved["seed"] == 2 and resolved["train"]["n_sessions"] == 4
    assert main(["eval", "--config", config, "--out", out]) == EXIT_OK
    assert (tmp_path / "run" / "eval.csv").exists()
    assert main(["dump-mfc-curves", "--out", out, "--users", "2", "--points", "4"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "run" / "mfc_curves.csv")))
    assert len(rows) == 6 * 2 * 4


def test_resume_flag(config, tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--config", config, "--out", out, "--trials", "1"]) == EXIT_OK
    assert main(["train", "--config", config, "--out", out, "--trials", "1", "--resume"]) == EXIT_OK


def test_eval_without_run_is_config_error(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "nothing")]) == EXIT_CONFIG


def test_compare_methods_subset(config, tmp_path, capsys):
    out = str(tmp_path / "cmp")
    assert main(["compare", "--config", config, "--out", out, "--trials", "2",
                 "--methods", "cem_linear,xmtf_no_outer"]) == EXIT_OK
    assert "cem_linear" in capsys.readouterr().out
    assert main(["compare", "--config", config, "--out", out, "--methods", "cem_cubic"]) == EXIT_CONFIG


def test_sweep_lambda_verb(config, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep-lambda", "--config", config, "--out", str(out), "--trials", "1",
                 "--lambdas", "0,0.4"]) == EXIT_OK
    assert (out / "curves_lambda_0.4.csv").exists()
    assert main(["sweep-lambda", "--config", config, "--out", str(out), "--lambdas", "2"]) == EXIT_CONFIG


def test_verify_sprecher_verb(tmp_path, capsys):
    assert main(["verify-sprecher", "--out", str(tmp_path), "--samples", "200"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "sprecher.csv")))
    assert len(rows) == 3 * 7
    assert all(float(r["max_rel_err"]) <= 1e-9 for r in rows)


def test_calibrate_env_verb(tmp_path):
    code = main(["calibrate-env", "--out", str(tmp_path), "--users", "50"])
    report = json.load(open(tmp_path / "calibration.json"))
    assert code == (EXIT_OK if report["tradeoff"]["shortening"] >= 0.1 else EXIT_RUNTIME)
    assert len(report["base_rates"]["empirical"]) == 6
