import csv
import json

import numpy as np
import pytest

from sgrpf import cli
from sgrpf.ssm import Dataset


def run(tmp_path, *argv):
    return cli.main([argv[0], "--out-dir", str(tmp_path), *argv[1:]])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_dataset_and_manifest(tmp_path):
    assert run(tmp_path, "simulate", "--t", "12", "--seed", "4") == 0
    data = Dataset.load(str(tmp_path / "data.csv"))
    assert data.t_count == 12
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["config"]["seed"] == 4
    assert run(tmp_path / "again", "simulate", "--t", "12", "--seed", "4") == 0
    np.testing.assert_array_equal(Dataset.load(str(tmp_path / "again" / "data.csv")).y, data.y)


def test_filter_with_kalman_oracle_and_replicates(tmp_path, capsys):
    assert run(tmp_path, "filter", "--t", "8", "--n", "20", "--replicates", "400", "--oracle", "kalman") == 0
    out = json.loads((tmp_path / "filter.json").read_text())
    assert len(out["logW"]) == 8 and len(out["ess"]) == 9  # ess includes t = 0
    # Z_hat is unbiased for the Kalman evidence
    assert abs(out["mean_Zhat"] - out["kalman_Z"]) < 4 * out["se_Zhat"]
    assert json.loads(capsys.readouterr().out)["logZhat"] == out["logZhat"]


def test_filter_reads_a_dataset(tmp_path):
    run(tmp_path, "simulate", "--model", "sv", "--t", "15")
    assert run(tmp_path, "filter", "--data", str(tmp_path / "data.csv"), "--ess-threshold", "0.5") == 0
    out = json.loads((tmp_path / "filter.json").read_text())
    assert out["T"] == 15 and len(out["theta"]) == 3


@pytest.mark.parametrize("pair", list(cli.PAIRS))
def test_gradcheck_pairs_agree(tmp_path, pair):
    assert run(tmp_path, "gradcheck", "--pair", pair, "--t", "4", "--n", "3", "--seeds", "2") == 0
    table = rows(tmp_path / "gradcheck.csv")
    assert [r["pass"] for r in table] == ["true", "true"]
    assert all(float(r["max_rel_diff"]) < 1e-8 for r in table)


def test_gradcheck_failure_exit_code(tmp_path):
    assert run(tmp_path, "gradcheck", "--t", "4", "--seeds", "1", "--tol", "0") == 3


def test_train_writes_one_trace_per_seed(tmp_path, capsys):
    code = run(tmp_path, "train", "--t", "10", "--n", "4", "--epochs", "3", "--seeds", "2", "--theta0", "0.5,0.5", "--lr", "0.05")
    assert code == 0
    for k in range(2):
        table = rows(tmp_path / f"trace_seed{k}.csv")
        assert len(table) == 3 and float(table[0]["theta1"]) == 0.5
    assert capsys.readouterr().out.count("replicate") == 2


def test_train_with_test_data_and_learned_proposal(tmp_path, capsys):
    run(tmp_path, "simulate", "--t", "10", "--seed", "9", "--output", "test.csv")
    code = run(tmp_path, "train", "--t", "10", "--n", "4", "--epochs", "2", "--proposal", "learned", "--test-data", str(tmp_path / "test.csv"), "--test-every", "1", "--test-replicates", "2")
    assert code == 0
    table = rows(tmp_path / "trace.csv")
    assert all(np.isfinite(float(r["test_logz"])) for r in table)
    assert "phi =" in capsys.readouterr().out


def test_train_divergence_exit_code(tmp_path):
    code = run(tmp_path, "train", "--t", "10", "--n", "4", "--epochs", "5", "--optimizer", "sgd", "--lr", "1e7", "--theta0", "0.5,0.5")
    assert code == 4
    assert (tmp_path / "trace.csv").exists()


def test_bench_small(tmp_path):
    code = run(tmp_path, "bench", "--n", "4", "--t", "5", "--reps", "1", "--mpf-n", "2,4", "--mpf-t", "2", "--no-assert")
    assert code == 0
    table = rows(tmp_path / "bench.csv")
    assert {r["variant"] for r in table} == {"sis", "pf", "pf_sf", "dpf_sgr", "mpf"}
    assert float(next(r for r in table if r["variant"] == "pf")["ratio_to_pf"]) == 1.0


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"t": 6, "seed": 3}))
    assert run(tmp_path, "simulate", "--config", str(cfg), "--seed", "5") == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["t"] == 6 and man["config"]["seed"] == 5
    # a manifest can be fed back as a config
    assert run(tmp_path / "b", "simulate", "--config", str(tmp_path / "manifest.json")) == 0
    assert Dataset.load(str(tmp_path / "b" / "data.csv")).t_count == 6


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(tmp_path, "simulate", "--config", str(cfg)) == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SGRPF_SEED", "17")
    assert run(tmp_path, "simulate", "--t", "3") == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["seed"] == 17
    monkeypatch.setenv("SGRPF_SEED", "x")
    assert run(tmp_path, "simulate", "--t", "3") == 2


@pytest.mark.parametrize(
    "argv",
    [
        ("simulate", "--t", "0"),
        ("simulate", "--theta", "1,2,3"),
        ("filter", "--n", "0"),
        ("filter", "--model", "sv", "--oracle", "kalman"),
        ("filter", "--data", "/nonexistent.csv"),
        ("filter", "--variant", "bogus"),
        ("gradcheck", "--pair", "nope"),
        ("train", "--epochs", "0"),
        ("train", "--test-every", "0"),
        ("simulate", "--seed", "-1"),
        ("frobnicate",),
    ],
)
def test_usage_errors(tmp_path, argv):
    assert run(tmp_path, *argv) == 2


def test_manifest_is_written_before_failure(tmp_path):
    assert run(tmp_path, "gradcheck", "--t", "4", "--seeds", "1", "--tol", "0") == 3
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["artifacts"] == [str(tmp_path / "gradcheck.csv")]
