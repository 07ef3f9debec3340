import json
import logging
import platform
import re
import sys
from contextlib import nullcontext
from datetime import UTC, datetime
from pathlib import Path
from typing import Annotated, Any

import attrs
import numpy as np
from attrs import frozen
from cyclopts import App, Parameter, validators

from dscml_lab import __version__
from dscml_lab.config import (
    ALIGNMENTS,
    EVAL_SPLITS,
    VARIANTS,
    ExperimentConfig,
    config_fingerprint,
    config_snapshot,
    load_config,
    load_matrix,
)
from dscml_lab.dataset import check_compatible, generate_dataset, read_dataset, write_dataset
from dscml_lab.errors import ConfigError, LabError
from dscml_lab.formatter import (
    format_error,
    write_ablation_csv,
    write_confusion_csv,
    write_iou_csv,
    write_verify_report,
)
from dscml_lab.tensor import inject_fault
from dscml_lab.training import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    evaluate,
    load_checkpoint,
    run_ablation,
    train,
)
from dscml_lab.verify import run_battery

logger = logging.getLogger(__name__)

app = App(name="dscml-lab", version=__version__)

MANIFEST_NAME = "run.json"

Root = Annotated[
    Path,
    Parameter(
        help="Output root for data and runs (env DSCML_LAB_OUT)",
        env_var="DSCML_LAB_OUT",
    ),
]
Verbose = Annotated[bool, Parameter(help="Log at DEBUG level", name=["--verbose", "-v"])]
ConfigPath = Annotated[
    Path | None,
    Parameter(
        help="Experiment configuration (TOML); defaults apply when omitted",
        name=["--config", "-c"],
        validator=validators.Path(exists=True, dir_okay=False),
    ),
]
DataDir = Annotated[
    Path | None,
    Parameter(help="Dataset directory written by gen-data (defaults to <root>/data)"),
]


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _fail(error: BaseException) -> None:
    print(format_error(error), file=sys.stderr)
    sys.exit(1)


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def run_name(config: ExperimentConfig) -> str:
    parts = [config.variant]
    if config.alignment is not None:
        parts.append(config.alignment)
    parts.append(f"seed{config.seed}")
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", "-".join(parts))


def resolve_config(
    path: Path | None,
    seed: int | None = None,
    variant: str | None = None,
    alignment: str | None = None,
) -> ExperimentConfig:
    """Load a configuration and apply command-line overrides."""
    config = load_config(path)
    overrides: dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if variant is not None:
        overrides["variant"] = variant
    if alignment is not None:
        overrides["alignment"] = alignment
    elif variant is not None and "cmal" not in variant:
        overrides["alignment"] = None
    return attrs.evolve(config, **overrides) if overrides else config


@frozen
class RunManifest:
    """What a run was started with: enough to reproduce it."""

    command: str
    config: dict[str, Any]
    fingerprint: str
    seeds: dict[str, int]
    artifacts: dict[str, str]
    version: str
    python_version: str
    numpy_version: str
    started_at: str
    finished_at: str | None = None

    @classmethod
    def for_run(cls, command: str, config: ExperimentConfig, artifacts: dict[str, Path]) -> "RunManifest":
        return cls(
            command=command,
            config=config_snapshot(config),
            fingerprint=config_fingerprint(config),
            seeds={"master": config.seed, "data": config.data.seed},
            artifacts={name: str(path) for name, path in artifacts.items()},
            version=__version__,
            python_version=platform.python_version(),
            numpy_version=np.__version__,
            started_at=_now(),
        )

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(attrs.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@app.command
def gen_data(
    config_path: ConfigPath = None,
    out: Annotated[
        Path | None,
        Parameter(help="Dataset directory (defaults to <root>/data)", name=["--out", "-o"]),
    ] = None,
    seed: Annotated[int | None, Parameter(help="Override data.seed")] = None,
    root: Root = Path("var"),
    verbose: Verbose = False,
) -> None:
    """
    Generate the source-train, target-train, target-val and target-test splits.

    The labels of target-train are written to a separate sealed directory.

    Examples:
        dscml-lab gen-data -c etc/default.toml
        dscml-lab gen-data -c etc/tiny.toml -o /tmp/tiny-data
    """
    _configure_logging(verbose)
    try:
        config = load_config(config_path)
        data = config.data if seed is None else attrs.evolve(config.data, seed=seed)
        write_dataset(generate_dataset(data), out or root / "data")
    except (LabError, OSError) as e:
        _fail(e)


@app.command(name="train")
def train_command(
    config_path: ConfigPath = None,
    out: Annotated[
        Path | None,
        Parameter(help="Run directory (defaults to <root>/runs/<variant>-seed<seed>)", name=["--out", "-o"]),
    ] = None,
    data: DataDir = None,
    seed: Annotated[int | None, Parameter(help="Override the master seed")] = None,
    variant: Annotated[
        str | None,
        Parameter(help=f"Override the variant: {', '.join(VARIANTS)}"),
    ] = None,
    alignment: Annotated[
        str | None,
        Parameter(help=f"Override the adversarial alignment option: {', '.join(ALIGNMENTS)}"),
    ] = None,
    resume: Annotated[bool, Parameter(help="Continue from the checkpoint in the run directory")] = False,
    root: Root = Path("var"),
    verbose: Verbose = False,
) -> None:
    """
    Train one configuration; writes run.json, metrics.jsonl and a checkpoint.

    Examples:
        dscml-lab train -c etc/default.toml --variant baseline
        dscml-lab train -c etc/default.toml --variant dscml+cmal --alignment a --seed 3
        dscml-lab train -c etc/default.toml --resume
    """
    _configure_logging(verbose)
    try:
        config = resolve_config(config_path, seed, variant, alignment)
        data_dir = data or root / "data"
        dataset = read_dataset(data_dir)
        run_dir = out or root / "runs" / run_name(config)
        manifest = RunManifest.for_run(
            "train",
            config,
            {
                "data": data_dir,
                "manifest": run_dir / MANIFEST_NAME,
                "metrics": run_dir / METRICS_NAME,
                "checkpoint": run_dir / CHECKPOINT_NAME,
            },
        )
        manifest.write(run_dir / MANIFEST_NAME)
        result = train(config, dataset, run_dir=run_dir, resume=resume)
        attrs.evolve(manifest, finished_at=_now()).write(run_dir / MANIFEST_NAME)
        if result.final is not None:
            logger.info(
                "final %s mIoU: 2D %.4f 3D %.4f Avg %.4f",
                result.final.split,
                result.final.miou("2D"),
                result.final.miou("3D"),
                result.final.miou("Avg"),
            )
    except (LabError, OSError) as e:
        _fail(e)


@app.command(name="eval")
def eval_command(
    checkpoint: Annotated[
        Path,
        Parameter(
            help="Checkpoint manifest written by train",
            validator=validators.Path(exists=True, dir_okay=False),
        ),
    ],
    split: Annotated[str, Parameter(help=f"Split to evaluate: {', '.join(EVAL_SPLITS)}")] = "target-val",
    data: DataDir = None,
    out: Annotated[
        Path | None,
        Parameter(help="Directory for the CSV files (defaults to the checkpoint's directory)", name=["--out", "-o"]),
    ] = None,
    root: Root = Path("var"),
    verbose: Verbose = False,
) -> None:
    """
    Evaluate a checkpoint: per-class IoU and mIoU of the 2D, 3D and Avg heads.

    Writes iou-<split>.csv and one confusion-<split>-<head>.csv per head,
    and prints the IoU table.

    Examples:
        dscml-lab eval var/runs/dscml+cmal-seed0/checkpoint.json --split target-test
    """
    _configure_logging(verbose)
    try:
        if split not in EVAL_SPLITS:
            raise ConfigError(f"cannot evaluate split {split!r}; choose from {list(EVAL_SPLITS)}")
        state, config = load_checkpoint(checkpoint)
        dataset = read_dataset(data or root / "data")
        check_compatible(dataset, config.data)
        result = evaluate(state, dataset, split, config)
        out_dir = out or checkpoint.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        with Path.open(out_dir / f"iou-{split}.csv", "w", encoding="utf-8", newline="") as f:
            write_iou_csv(result.heads, dataset.class_names, f)
        for head, iou in result.heads.items():
            with Path.open(out_dir / f"confusion-{split}-{head}.csv", "w", encoding="utf-8", newline="") as f:
                write_confusion_csv(iou.confusion, dataset.class_names, f)
        write_iou_csv(result.heads, dataset.class_names, sys.stdout)
    except (LabError, OSError) as e:
        _fail(e)


@app.command
def ablate(
    matrix: Annotated[
        Path,
        Parameter(
            help="Ablation matrix (TOML) with seeds and [[cell]] tables",
            validator=validators.Path(exists=True, dir_okay=False),
        ),
    ],
    data: DataDir = None,
    out: Annotated[
        Path | None,
        Parameter(help="Directory for cell runs and ablation.csv (defaults to <root>/ablations/<matrix>)", name=["--out", "-o"]),
    ] = None,
    threads: Annotated[int, Parameter(help="Cells trained concurrently", validator=validators.Number(gte=1))] = 1,
    root: Root = Path("var"),
    verbose: Verbose = False,
) -> None:
    """
    Train every (cell, seed) pair of an ablation matrix and tabulate mIoU.

    Rows are cells, columns the 2D/3D/Avg heads in percent with the change
    from the row above, followed by the per-seed values.

    Examples:
        dscml-lab ablate etc/ablation-patch.toml --threads 4
    """
    _configure_logging(verbose)
    try:
        spec = load_matrix(matrix)
        dataset = read_dataset(data or root / "data")
        out_dir = out or root / "ablations" / matrix.stem
        result = run_ablation(spec, dataset, workers=threads, out_dir=out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with Path.open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="") as f:
            write_ablation_csv(result, f)
        write_ablation_csv(result, sys.stdout)
    except (LabError, OSError) as e:
        _fail(e)


@app.command
def verify(
    instances: Annotated[
        int,
        Parameter(help="Random instances per gradient check", validator=validators.Number(gte=1)),
    ] = 100,
    oracle_cases: Annotated[
        int,
        Parameter(help="Random cases for the pooling oracle", validator=validators.Number(gte=1)),
    ] = 1000,
    seed: Annotated[int, Parameter(help="Seed of the check inputs")] = 0,
    fault: Annotated[
        str | None,
        Parameter(help="Corrupt the derivative of this op (negative control)"),
    ] = None,
    verbose: Verbose = False,
) -> None:
    """
    Run the verification battery; exits nonzero when any check fails.

    Examples:
        dscml-lab verify
        dscml-lab verify --fault softmax
    """
    _configure_logging(verbose)
    with inject_fault(fault) if fault else nullcontext():
        checks = run_battery(instances=instances, oracle_cases=oracle_cases, seed=seed)
    write_verify_report(checks, sys.stdout)
    if not all(c.passed for c in checks):
        sys.exit(1)
