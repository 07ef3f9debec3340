import io
import json
import math

import numpy as np
import pytest

from dscml_lab.config import AblationCell
from dscml_lab.errors import ConfigError
from dscml_lab.formatter import (
    ablation_rows,
    format_delta,
    format_error,
    format_number,
    metrics_line,
    read_metrics,
    to_json,
    write_confusion_csv,
    write_iou_csv,
    write_verify_report,
)
from dscml_lab.losses import miou
from dscml_lab.training import AblationResult, CellOutcome
from dscml_lab.verify import CheckResult


@pytest.fixture
def ablation_result():
    """Two cells over two seeds; the second cell lost one seed to an error."""
    cells = (AblationCell(name="cml", variant="cml"), AblationCell(name="dscml", variant="dscml"))
    outcomes = (
        CellOutcome(cell="cml", seed=0, miou={"2D": 0.40, "3D": 0.50, "Avg": 0.50}),
        CellOutcome(cell="cml", seed=1, miou={"2D": 0.42, "3D": 0.52, "Avg": 0.52}),
        CellOutcome(cell="dscml", seed=0, miou={"2D": 0.45, "3D": 0.50, "Avg": 0.55}),
        CellOutcome(cell="dscml", seed=1, miou=None, error="TrainingError: non-finite gradient"),
    )
    return AblationResult(cells=cells, seeds=(0, 1), outcomes=outcomes)


def test_format_number_keeps_17_digits():
    """Test the round-trippable rendering of floats."""
    assert format_number(0.1) == "0.10000000000000001"
    assert float(format_number(1 / 3)) == 1 / 3
    assert format_number(math.nan) == "nan"


def test_to_json_is_sorted_and_compact():
    """Test key order, separators, numpy scalars and non-finite values."""
    line = to_json({"b": np.float64(0.5), "a": [np.int64(2), True, None], "c": math.inf})
    assert line == '{"a":[2,true,null],"b":0.5,"c":null}'
    assert to_json({"x": 0.1}) == '{"x":0.10000000000000001}'


def test_to_json_rejects_unknown_types():
    """Test that arbitrary objects are not silently serialized."""
    with pytest.raises(TypeError):
        to_json({"x": object()})


def test_metrics_lines_read_back(temp_dir):
    """Test that metrics lines parse back to the recorded values."""
    path = temp_dir / "metrics.jsonl"
    record = {"iteration": 3, "losses": {"seg": 1 / 3}, "miou": None}
    path.write_text(metrics_line(record) + "\n" + metrics_line({**record, "iteration": 4}) + "\n", encoding="utf-8")
    records = read_metrics(path)
    assert [r["iteration"] for r in records] == [3, 4]
    assert records[0]["losses"]["seg"] == 1 / 3


def test_write_iou_csv():
    """Test the per-head IoU table with an absent class."""
    heads = {"2D": miou(np.array([0, 0, 1]), np.array([0, 1, 1]), 3)}
    output = io.StringIO()
    write_iou_csv(heads, ("ground", "vehicle", "pole"), output)
    lines = output.getvalue().splitlines()
    assert lines[0] == "head,ground,vehicle,pole,mIoU"
    assert lines[1] == "2D,0.5,0.5,nan,0.5"


def test_write_confusion_csv():
    """Test that rows are true classes and columns predicted classes."""
    output = io.StringIO()
    write_confusion_csv(np.array([[3, 1], [0, 2]]), ("ground", "vehicle"), output)
    assert output.getvalue() == "true\\pred,ground,vehicle\nground,3,1\nvehicle,0,2\n"


def test_format_delta():
    """Test the arrow notation for changes between rows."""
    assert format_delta(1.04) == "(↑1.0)"
    assert format_delta(-0.44) == "(↓0.4)"
    assert format_delta(math.nan) == ""


def test_ablation_rows(ablation_result):
    """Test means in percent, changes from the row above, per-seed values and failures."""
    header, first, second = ablation_rows(ablation_result)
    assert header[:4] == ["variant", "2D", "3D", "Avg"]
    assert header[4:6] == ["2D[seed=0]", "2D[seed=1]"]
    assert header[-1] == "failed"
    assert first[:4] == ["cml", "41.0", "51.0", "51.0"]
    assert second[:4] == ["dscml", "45.0 (↑4.0)", "50.0 (↓1.0)", "55.0 (↑4.0)"]
    assert second[4:6] == ["0.45000000000000001", ""]
    assert first[-1] == "0"
    assert second[-1] == "1"


def test_write_verify_report():
    """Test per-check lines and the summary line."""
    checks = [
        CheckResult(name="grad/add", passed=True, seconds=0.25, detail="100 instances"),
        CheckResult(name="pooling/oracle", passed=False, seconds=1.0, detail="case 3"),
    ]
    output = io.StringIO()
    write_verify_report(checks, output)
    lines = output.getvalue().splitlines()
    assert lines[0].startswith("PASS  grad/add")
    assert lines[1].startswith("FAIL  pooling/oracle")
    assert lines[2] == "1 of 2 checks failed in 1.2s: pooling/oracle"

    output = io.StringIO()
    write_verify_report(checks[:1], output)
    assert output.getvalue().splitlines()[-1] == "all 1 checks passed in 0.2s"


def test_format_error():
    """Test the machine-readable error payload."""
    payload = json.loads(format_error(ConfigError("unknown configuration key(s): optim.lr2")))
    assert payload == {"error": "ConfigError", "message": "unknown configuration key(s): optim.lr2"}
