import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ctpomdp import cli
from ctpomdp.envs import build_tiger
from ctpomdp.hjb import TrainingDiverged


def run_cli(*args):
    return cli.main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


# -- simulate --------------------------------------------------------------------------


def test_simulate_smoke(tmp_path):
    out = tmp_path / "sim"
    assert run_cli("simulate", "--env", "tiger", "--seed", 0, "--horizon", 10, "--out", out) == 0
    rows = read_csv(out / "trace.csv")
    assert len(rows) > 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 0
    assert manifest["version"]
    assert set(manifest["files"]) == {"config.json", "trace.csv", "trace.json"}
    config = json.loads((out / "config.json").read_text())
    assert config["horizon"] == 10.0 and config["env"] == "tiger"


def test_simulate_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run_cli("simulate", "--env", "aloha", "--seed", 3, "--horizon", 5, "--out", tmp_path / name) == 0
    for f in ("trace.csv", "trace.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run_cli("simulate", "--env", "aloha", "--seed", 4, "--horizon", 5, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() != (tmp_path / "c" / "trace.csv").read_bytes()


def test_seed_falls_back_to_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("CTPOMDP_SEED", "17")
    assert run_cli("simulate", "--horizon", 1, "--out", tmp_path / "s") == 0
    assert json.loads((tmp_path / "s" / "manifest.json").read_text())["seed"] == 17


def test_default_output_directory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CTPOMDP_SEED", raising=False)
    assert run_cli("simulate", "--env", "tiger", "--horizon", 1) == 0
    assert (tmp_path / "runs" / "simulate-tiger-seed0" / "trace.csv").exists()


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"env": "gridworld", "horizon": 2.0, "seed": 5}))
    assert run_cli("simulate", "--config", cfg, "--horizon", 1.5, "--out", tmp_path / "o") == 0
    resolved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert resolved["env"] == "gridworld" and resolved["horizon"] == 1.5 and resolved["seed"] == 5
    # every default is echoed
    assert {"dt", "policy", "initial_state", "out"} <= set(resolved)


def test_model_file_environment(tmp_path):
    path = tmp_path / "tiger.json"
    build_tiger().to_json(path)
    assert run_cli("simulate", "--env", path, "--horizon", 1, "--out", tmp_path / "m") == 0


# -- errors ------------------------------------------------------------------------------


def test_unknown_environment_is_named(tmp_path, capsys):
    code = run_cli("simulate", "--env", "moon-lander", "--out", tmp_path / "x")
    assert code == cli.EXIT_CONFIG
    err = last_error(capsys)
    assert err["error"] == "config" and "moon-lander" in err["message"]


def test_unknown_option(tmp_path, capsys):
    assert run_cli("simulate", "--bogus", 1, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert "bogus" in last_error(capsys)["message"]


def test_bad_value_type(tmp_path, capsys):
    assert run_cli("simulate", "--horizon", "long", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert "horizon" in last_error(capsys)["message"]


def test_invalid_training_config(tmp_path, capsys):
    assert run_cli("train-collocation", "--episodes", 0, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert last_error(capsys)["error"] == "config"


def test_divergence_exit_code(tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingDiverged("value collocation diverged at step 3")

    monkeypatch.setattr(cli, "collocation_train", boom)
    assert run_cli("train-collocation", "--out", tmp_path / "x") == cli.EXIT_DIVERGED
    assert last_error(capsys)["error"] == "diverged"


def test_io_error_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run_cli("simulate", "--horizon", 1, "--out", blocker / "sub") == cli.EXIT_IO
    assert last_error(capsys)["error"] == "io"


def test_missing_checkpoint(tmp_path, capsys):
    assert run_cli("export-value-grid", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert "checkpoint" in last_error(capsys)["message"]


def test_validate_model(tmp_path, capsys):
    assert run_cli("validate-model", "--env", "aloha", "--out", tmp_path / "ok") == 0
    summary = json.loads((tmp_path / "ok" / "manifest.json").read_text())["summary"]
    assert summary["num_states"] == 30 and summary["valid"]
    bad = build_tiger().to_dict()
    bad["obs_likelihood"][0][0] = [0.9, 0.9]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert run_cli("validate-model", "--env", path, "--out", tmp_path / "bad") == cli.EXIT_CONFIG
    assert "likelihood" in last_error(capsys)["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "ctpomdp", "validate-model", "--env", "tiger", "--out", str(tmp_path / "v")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == str(tmp_path / "v")


# -- training, export and evaluation ------------------------------------------------------


@pytest.fixture(scope="module")
def small_collocation(tmp_path_factory):
    out = tmp_path_factory.mktemp("colloc")
    code = run_cli("train-collocation", "--env", "tiger", "--seed", 1, "--episodes", 3,
                   "--samples", 512, "--out", out)
    assert code == 0
    return out


def test_train_collocation_outputs(small_collocation):
    ck = json.loads((small_collocation / "checkpoint.json").read_text())
    assert ck["method"] == "collocation" and ck["seed"] == 1
    assert read_csv(small_collocation / "metrics.csv")[0] == ["episode", "value_loss"]
    assert len(read_csv(small_collocation / "metrics.csv")) == 4


def test_train_collocation_is_reproducible(small_collocation, tmp_path):
    assert run_cli("train-collocation", "--env", "tiger", "--seed", 1, "--episodes", 3,
                   "--samples", 512, "--out", tmp_path / "again") == 0
    for f in ("checkpoint.json", "metrics.csv", "advantage_metrics.csv"):
        assert (small_collocation / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_export_value_grid_tiger(small_collocation, tmp_path):
    out = tmp_path / "grid"
    assert run_cli("export-value-grid", "--checkpoint", small_collocation / "checkpoint.json",
                   "--resolution", 100, "--out", out) == 0
    rows = read_csv(out / "value_grid.csv")
    assert rows[0] == ["pi_0", "V", "A_listen", "A_open-left", "A_open-right", "greedy"]
    body = np.array(rows[1:], dtype=float)
    assert body.shape == (101, 6)
    np.testing.assert_allclose(body[:, 0], np.linspace(0, 1, 101))
    assert np.all(body[:, 2:5].max(axis=1) == 0.0)
    np.testing.assert_array_equal(body[:, 5], np.argmax(body[:, 2:5], axis=1))


def test_export_rejects_mismatched_env(small_collocation, tmp_path, capsys):
    code = run_cli("export-value-grid", "--env", "aloha", "--checkpoint",
                   small_collocation / "checkpoint.json", "--out", tmp_path / "x")
    assert code == cli.EXIT_CONFIG
    assert "mismatch" in last_error(capsys)["message"]


def test_export_value_grid_gridworld(tmp_path):
    ck = tmp_path / "ck"
    assert run_cli("train-collocation", "--env", "gridworld", "--episodes", 1, "--samples", 256,
                   "--out", ck) == 0
    assert run_cli("export-value-grid", "--env", "gridworld", "--checkpoint", ck / "checkpoint.json",
                   "--out", tmp_path / "g") == 0
    rows = read_csv(tmp_path / "g" / "value_grid.csv")
    assert rows[0][:3] == ["col", "row", "V"] and rows[0][-1] == "greedy"
    assert len(rows) == 1 + 31


def test_train_au_outputs_and_reproducibility(tmp_path):
    args = ["train-au", "--env", "tiger", "--seed", 2, "--episodes", 2, "--subsamples", 50,
            "--episode_length", 1.0, "--steps_per_episode", 3]
    assert run_cli(*args, "--out", tmp_path / "a") == 0
    assert run_cli(*args, "--out", tmp_path / "b") == 0
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert rows[0] == ["episode", "mean_loss", "return", "sigma"] and len(rows) == 3
    for f in ("checkpoint.json", "metrics.csv", "loss_trace.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_evaluate_is_deterministic_and_replays_from_manifest(small_collocation, tmp_path):
    args = ["evaluate", "--checkpoint", small_collocation / "checkpoint.json", "--episodes", 6,
            "--horizon", 2.0, "--traces", 2, "--seed", 9]
    assert run_cli(*args, "--out", tmp_path / "a") == 0
    assert run_cli(*args, "--out", tmp_path / "b") == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["episodes"] == 6 and abs(sum(summary["occupancy"]) - 1) < 1e-12
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    assert sorted(p.name for p in (tmp_path / "a" / "traces").iterdir()) == ["episode_000.csv", "episode_001.csv"]
    # the manifest alone reproduces the metrics
    assert run_cli("evaluate", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "c" / "summary.json").read_bytes()


def test_evaluate_aloha_writes_marginal_series(tmp_path):
    out = tmp_path / "al"
    assert run_cli("evaluate", "--env", "aloha", "--policy", "random", "--episodes", 2,
                   "--horizon", 3.0, "--traces", 1, "--out", out) == 0
    rows = read_csv(out / "traces" / "aloha_marginals_000.csv")
    header = rows[0]
    assert header[:5] == ["t", "n", "c", "u", "expected_n"]
    assert [f"p_n{k}" for k in range(10)] == header[5:15]
    assert header[15:] == ["p_idle", "p_transmission", "p_collision"]
    body = np.array(rows[1:], dtype=float)
    np.testing.assert_allclose(body[:, 5:15].sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(body[:, 15:].sum(axis=1), 1.0, atol=1e-9)


def test_random_baseline_scores_below_trained_tiger_policy(tiger_collocation):
    greedy, _ = cli.evaluate_policy(build_tiger(), tiger_collocation.advantage, 200, 0, 10.0,
                                    initial_belief="uniform")
    random, _ = cli.evaluate_policy(build_tiger(), None, 200, 0, 10.0, policy="random",
                                    initial_belief="uniform")
    assert random["mean_return"] < greedy["mean_return"]
