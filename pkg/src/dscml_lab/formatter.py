import csv
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any, TextIO

import numpy as np

from .losses import IoUResult

if TYPE_CHECKING:
    from .training import AblationResult
    from .verify import CheckResult

HEADS = ("2D", "3D", "Avg")


def format_number(value: float) -> str:
    """
    Render a float with 17 significant digits.

    Args:
        value: The number to format

    Returns:
        The decimal rendering, "nan" for NaN
    """
    if math.isnan(value):
        return "nan"
    return format(value, ".17g")


def to_json(value: Any) -> str:
    """
    Serialize a record as compact single-line JSON with sorted keys.

    Floats carry 17 significant digits so byte-identical files mean
    bit-identical numbers; non-finite floats become null.
    """
    if value is None:
        return "null"
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        return format(float(value), ".17g") if math.isfinite(value) else "null"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, Mapping):
        items = (f"{json.dumps(str(k), ensure_ascii=False)}:{to_json(v)}" for k, v in sorted(value.items()))
        return "{" + ",".join(items) + "}"
    if isinstance(value, Sequence | np.ndarray):
        return "[" + ",".join(to_json(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def metrics_line(record: Mapping[str, Any]) -> str:
    return to_json(record)


def read_metrics(path: Path) -> list[dict[str, Any]]:
    """Parse a metrics JSONL file into one dict per line."""
    with Path.open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_iou_csv(heads: Mapping[str, IoUResult], class_names: Sequence[str], output: TextIO) -> None:
    """
    Write per-class IoU and mIoU of every head as CSV.

    Args:
        heads: IoU results keyed by head name
        class_names: Column names, one per class
        output: Output stream to write to
    """
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(["head", *class_names, "mIoU"])
    for head, result in heads.items():
        writer.writerow([head, *(format_number(v) for v in result.per_class), format_number(result.miou)])


def write_confusion_csv(confusion: np.ndarray, class_names: Sequence[str], output: TextIO) -> None:
    """Write a confusion matrix as CSV; rows are true classes, columns predicted classes."""
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, confusion, strict=True):
        writer.writerow([name, *(str(int(v)) for v in row)])


def format_delta(delta: float) -> str:
    """A signed percentage-point change in the table style "(↑1.0)" / "(↓0.4)"."""
    if math.isnan(delta):
        return ""
    arrow = "↑" if delta >= 0 else "↓"
    return f"({arrow}{abs(delta):.1f})"


def ablation_rows(result: "AblationResult") -> list[list[str]]:
    """
    Table rows: one per cell, mean mIoU per head in percent with the change
    from the row above, then the per-seed fractions.
    """
    header = ["variant", *HEADS]
    header += [f"{head}[seed={seed}]" for head in HEADS for seed in result.seeds]
    header.append("failed")
    rows = [header]
    previous: dict[str, float] | None = None
    for cell in result.cells:
        means = {head: 100.0 * result.mean(cell.name, head) for head in HEADS}
        row = [cell.name]
        for head in HEADS:
            text = "nan" if math.isnan(means[head]) else f"{means[head]:.1f}"
            if previous is not None:
                text = f"{text} {format_delta(means[head] - previous[head])}".rstrip()
            row.append(text)
        for head in HEADS:
            row += ["" if v is None else format_number(v) for v in result.per_seed(cell.name, head)]
        row.append(str(sum(1 for o in result.outcomes if o.cell == cell.name and o.error)))
        rows.append(row)
        previous = means
    return rows


def write_ablation_csv(result: "AblationResult", output: TextIO) -> None:
    writer = csv.writer(output, lineterminator="\n")
    writer.writerows(ablation_rows(result))


def format_check(check: "CheckResult") -> str:
    status = "PASS" if check.passed else "FAIL"
    return f"{status}  {check.name:<40} {check.seconds:8.3f}s  {check.detail}".rstrip()


def write_verify_report(checks: Iterable["CheckResult"], output: TextIO) -> None:
    """Write one line per check followed by a summary line."""
    checks = list(checks)
    for check in checks:
        output.write(format_check(check) + "\n")
    failed = [c.name for c in checks if not c.passed]
    total = sum(c.seconds for c in checks)
    if failed:
        output.write(f"{len(failed)} of {len(checks)} checks failed in {total:.1f}s: {', '.join(failed)}\n")
    else:
        output.write(f"all {len(checks)} checks passed in {total:.1f}s\n")


def format_error(error: BaseException) -> str:
    """The machine-readable one-line error payload written to stderr."""
    return json.dumps({"error": type(error).__name__, "message": str(error)}, sort_keys=True)
