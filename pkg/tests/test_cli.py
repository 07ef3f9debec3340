import json
from pathlib import Path
from unittest.mock import patch

import pytest

from dscml_lab import tensor
from dscml_lab.cli import MANIFEST_NAME, app, resolve_config, run_name
from dscml_lab.config import config_fingerprint, load_config
from dscml_lab.verify import CheckResult

from .conftest import TINY_TOML


def run(*args: str) -> int:
    """Invoke the app and return its exit status."""
    try:
        app(list(args))
    except SystemExit as e:
        return int(e.code or 0)
    return 0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated tiny dataset and one finished training run."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.toml"
    config.write_text(TINY_TOML, encoding="utf-8")
    data = root / "data"
    run_dir = root / "run"
    assert run("gen-data", "-c", str(config), "-o", str(data)) == 0
    assert run("train", "-c", str(config), "--data", str(data), "-o", str(run_dir)) == 0
    return config, data, run_dir


@pytest.fixture
def mock_run_battery():
    """Mock run_battery for testing the verify exit status."""
    with patch("dscml_lab.cli.run_battery") as mock:
        yield mock


def test_gen_data_writes_manifest(workspace):
    """Test that gen-data writes the manifest and sealed labels."""
    _, data, _ = workspace
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["splits"] == {"source-train": 2, "target-train": 2, "target-val": 1, "target-test": 1}
    assert (data / "target-train.sealed").is_dir()


def test_train_writes_run_artifacts(workspace):
    """Test the run manifest, metrics log and checkpoint of a training run."""
    config, data, run_dir = workspace
    manifest = json.loads((run_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    assert manifest["command"] == "train"
    assert manifest["fingerprint"] == config_fingerprint(load_config(config))
    assert manifest["seeds"] == {"master": 0, "data": 0}
    assert manifest["artifacts"]["data"] == str(data)
    assert manifest["finished_at"] is not None

    lines = (run_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == [1, 2, 3, 4]
    assert (run_dir / "checkpoint.json").is_file()


def test_eval_writes_tables(workspace, temp_dir, capsys):
    """Test that eval writes the IoU and confusion tables and prints the IoU table."""
    _, data, run_dir = workspace
    status = run("eval", str(run_dir / "checkpoint.json"), "--split", "target-test", "--data", str(data), "-o", str(temp_dir))
    assert status == 0
    iou = (temp_dir / "iou-target-test.csv").read_text(encoding="utf-8")
    assert iou.splitlines()[0].startswith("head,")
    assert [line.split(",")[0] for line in iou.splitlines()[1:]] == ["2D", "3D", "Avg"]
    for head in ("2D", "3D", "Avg"):
        assert (temp_dir / f"confusion-target-test-{head}.csv").is_file()
    assert capsys.readouterr().out == iou


def test_eval_refuses_unlabeled_split(workspace, temp_dir, capsys):
    """Test that the sealed training split cannot be evaluated from the command line."""
    _, data, run_dir = workspace
    status = run("eval", str(run_dir / "checkpoint.json"), "--split", "target-train", "--data", str(data), "-o", str(temp_dir))
    assert status == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ConfigError"
    assert not (temp_dir / "iou-target-train.csv").exists()


def test_train_without_dataset_fails(tiny_toml, temp_dir, capsys):
    """Test that a missing dataset directory exits with a ConfigError payload."""
    status = run("train", "-c", str(tiny_toml), "--data", str(temp_dir / "missing"), "-o", str(temp_dir / "run"))
    assert status == 1
    assert "gen-data" in capsys.readouterr().err


def test_train_rejects_alignment_without_adversarial_variant(tiny_toml, temp_dir):
    """Test that --alignment on a variant without discriminators is an error."""
    status = run("train", "-c", str(tiny_toml), "--variant", "baseline", "--alignment", "a", "--data", str(temp_dir))
    assert status == 1


def test_output_root_from_environment(tiny_toml, temp_dir, monkeypatch):
    """Test that DSCML_LAB_OUT sets the default data directory."""
    monkeypatch.setenv("DSCML_LAB_OUT", str(temp_dir))
    assert run("gen-data", "-c", str(tiny_toml)) == 0
    assert (temp_dir / "data" / "manifest.json").is_file()


def test_ablate_writes_table(workspace, temp_dir, capsys):
    """Test a one-cell, one-seed ablation end to end."""
    config, data, _ = workspace
    matrix = temp_dir / "matrix.toml"
    matrix.write_text(f'base = "{config.as_posix()}"\nseeds = [0]\n[[cell]]\nvariant = "cml"\n', encoding="utf-8")
    assert run("ablate", str(matrix), "--data", str(data), "-o", str(temp_dir / "out")) == 0
    table = (temp_dir / "out" / "ablation.csv").read_text(encoding="utf-8")
    assert table.splitlines()[0].startswith("variant,2D,3D,Avg")
    assert table.splitlines()[1].startswith("cml,")
    assert (temp_dir / "out" / "cml" / "seed-0" / "metrics.jsonl").is_file()
    assert capsys.readouterr().out == table


def test_ablate_rejects_empty_matrix(temp_dir):
    """Test that a matrix without cells exits nonzero."""
    matrix = temp_dir / "matrix.toml"
    matrix.write_text("seeds = [0]\n", encoding="utf-8")
    assert run("ablate", str(matrix), "--data", str(temp_dir)) == 1


def test_verify_exit_status(mock_run_battery, capsys):
    """Test that verify exits nonzero exactly when a check fails."""
    passing = CheckResult(name="grad/add", passed=True, seconds=0.1, detail="ok")
    failing = CheckResult(name="grad/exp", passed=False, seconds=0.1, detail="instance 0")

    mock_run_battery.return_value = [passing]
    assert run("verify", "--instances", "3") == 0
    mock_run_battery.assert_called_once_with(instances=3, oracle_cases=1000, seed=0)
    assert "all 1 checks passed" in capsys.readouterr().out

    mock_run_battery.return_value = [passing, failing]
    assert run("verify") == 1
    assert "1 of 2 checks failed" in capsys.readouterr().out


def test_verify_fault_is_active_during_battery(mock_run_battery):
    """Test that --fault corrupts the op only while the battery runs."""
    seen = []

    def battery(**kwargs):
        seen.append(set(tensor._FAULTY_OPS))
        return [CheckResult(name="grad/softmax/rows", passed=False, seconds=0.1, detail="instance 0")]

    mock_run_battery.side_effect = battery
    assert run("verify", "--fault", "softmax") == 1
    assert seen == [{"softmax"}]
    assert not tensor._FAULTY_OPS


def test_resolve_config_overrides(tiny_toml):
    """Test seed, variant and alignment overrides."""
    config = resolve_config(tiny_toml, seed=5, variant="dscml+cmal", alignment="c")
    assert (config.seed, config.variant, config.alignment) == (5, "dscml+cmal", "c")
    assert resolve_config(tiny_toml, variant="cml").alignment is None
    assert resolve_config(tiny_toml) == load_config(tiny_toml)


def test_run_name(tiny_toml):
    """Test that run directory names are filesystem-safe and distinct per setting."""
    assert run_name(resolve_config(tiny_toml, seed=2, variant="dscml")) == "dscml-seed2"
    assert run_name(resolve_config(tiny_toml, alignment="a")) == "dscml+cmal-a-seed0"
    assert Path(run_name(resolve_config(tiny_toml))).name == run_name(resolve_config(tiny_toml))


def test_eval_is_repeatable(workspace, temp_dir):
    """Test that evaluating a checkpoint twice writes identical tables."""
    _, data, run_dir = workspace
    for name in ("first", "second"):
        assert run("eval", str(run_dir / "checkpoint.json"), "--data", str(data), "-o", str(temp_dir / name)) == 0
    first = (temp_dir / "first" / "iou-target-val.csv").read_bytes()
    assert first == (temp_dir / "second" / "iou-target-val.csv").read_bytes()
