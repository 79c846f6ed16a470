import json
import subprocess
import sys

import pytest

from spinconv.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, known_keys, main

SMALL_MODEL = ["model.m=4", "model.k=2", "model.d=8", "model.b=2", "model.n_lat=6", "model.n_lon=8",
               "model.n_basis=16"]


def _sets(items):
    return [arg for item in items for arg in ("--set", item)]


def test_help_lists_every_key_with_units():
    out = subprocess.run([sys.executable, "-m", "spinconv.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for key in known_keys():
        assert key in out.stdout, key
    assert "Å" in out.stdout and "eV/Å" in out.stdout


def test_unknown_key_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--set", "model.mm=3"]) == EXIT_CONFIG
    assert "model.mm" in capsys.readouterr().err


def test_invalid_value_names_the_field(capsys):
    assert main(["check", "--set", "train.lr=fast"]) == EXIT_CONFIG
    assert "train.lr" in capsys.readouterr().err
    assert main(["check", "--set", "model.m=0"]) == EXIT_CONFIG


def test_bad_subcommand_exits_2():
    assert main(["fly"]) == EXIT_CONFIG


def test_gen_data_is_deterministic(tmp_path):
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        args = ["gen-data", "--seed", "7"] + _sets(["data.n_structures=12", f"paths.dataset={json.dumps(str(p))}"])
        assert main(args) == EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_check_on_fresh_model(capsys):
    status = main(["check"])
    lines = capsys.readouterr().out.strip().split("\n")
    failed = [line for line in lines if line.startswith("FAIL")]
    if status != EXIT_OK:
        # the only check allowed to fail is the quadrature-limited conservation check
        assert status == EXIT_RUNTIME
        assert len(failed) == 1 and "energy conservation" in failed[0], failed
        pytest.xfail(f"trapezoid quadrature limit: {failed[0]}")
    assert not failed and lines[-1].endswith("checks passed")


def test_check_failure_exits_1(capsys):
    # an 8-cell longitude grid is too coarse for the rotation tolerance
    assert main(["check"] + _sets(SMALL_MODEL)) == EXIT_RUNTIME
    assert "FAIL  rotation invariance" in capsys.readouterr().out


def test_missing_checkpoint_is_runtime_error(tmp_path):
    data = tmp_path / "d.jsonl"
    assert main(["gen-data"] + _sets(["data.n_structures=4", f"paths.dataset={json.dumps(str(data))}"])) == EXIT_OK
    args = ["eval"] + _sets([f"paths.dataset={json.dumps(str(data))}",
                             f"paths.checkpoint={json.dumps(str(tmp_path / 'nope.json'))}"])
    assert main(args) == EXIT_RUNTIME


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"n_structures": 5}, "paths.dataset": str(tmp_path / "x.jsonl")}))
    assert main(["gen-data", "--config", str(cfg), "--set", "data.n_structures=3"]) == EXIT_OK
    assert len((tmp_path / "x.jsonl").read_text().strip().split("\n")) == 1 + 3
    (tmp_path / "bad.json").write_text("[1, 2]")
    assert main(["gen-data", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    common = _sets(SMALL_MODEL + [
        f"paths.dataset={json.dumps(str(root / 'data.jsonl'))}",
        f"paths.out_dir={json.dumps(str(root / 'out'))}",
        "data.n_structures=150", "data.atoms_max=7",
        "model.rotation_samples=2",
        "train.max_steps=400", "train.eval_every=200", "train.lr=0.003", "train.batch_size=4",
        "relax.n_structures=3", "relax.max_iter=20",
    ]) + ["--seed", "2"]
    assert main(["gen-data"] + common) == EXIT_OK
    assert main(["train"] + common) == EXIT_OK
    return root, common


def test_train_writes_metrics_and_checkpoint(trained_run):
    root, _ = trained_run
    out = root / "out"
    assert (out / "checkpoint.json").exists() and (out / "split.json").exists()
    header = (out / "metrics.csv").read_text().split("\n")[0]
    assert header.startswith("step,lr,train_loss")


def test_train_then_eval_beats_median_baseline(trained_run, capsys):
    _, common = trained_run
    capsys.readouterr()
    assert main(["eval"] + common) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["subset"] == "held-out ID test split"
    assert report["model"]["force_mae"] < report["median_baseline"]["force_mae"]


def test_relax_writes_trajectories(trained_run, capsys):
    root, common = trained_run
    assert main(["relax"] + common) == EXIT_OK
    summary = json.loads((root / "out" / "relax" / "summary.json").read_text())
    assert summary["n_structures"] == 3
    assert len(list((root / "out" / "relax").glob("trajectory_*.jsonl"))) == 3
