"""
Experiment configuration: a frozen attrs tree loaded from TOML.

Every field has a default, so an empty file is a valid configuration. Unknown
keys at any depth are errors, which catches typos in ablation sweeps.
"""

import hashlib
import json
import tomllib
from pathlib import Path
from typing import Any

import attrs
from attrs import field, frozen, validators

from dscml_lab.errors import ConfigError
from dscml_lab.geometry import SHIFT_PRESETS, SceneDims

VARIANTS = ("baseline", "cml", "scml", "dscml", "dscml+cmal", "dscml+cmal+pl")
ALIGNMENTS = ("a", "b", "c")
STD_LOSSES = ("minmax", "avg", "none")
PL_MODES = ("global", "class-median")
EVAL_SPLITS = ("source-train", "target-val", "target-test")

DEFAULT_ALIGNMENT = "b"


def _non_negative(instance: object, attribute: attrs.Attribute, value: float) -> None:
    if value < 0:
        raise ConfigError(f"{attribute.name} must be >= 0, got {value}")


def _positive(instance: object, attribute: attrs.Attribute, value: float) -> None:
    if value <= 0:
        raise ConfigError(f"{attribute.name} must be > 0, got {value}")


def _one_of(choices: tuple[str, ...]) -> Any:
    def check(instance: object, attribute: attrs.Attribute, value: str) -> None:
        if value not in choices:
            raise ConfigError(f"{attribute.name} must be one of {list(choices)}, got {value!r}")

    return check


def _int_tuple(value: Any) -> tuple[int, ...]:
    return tuple(int(v) for v in value)


_INT = validators.instance_of(int)
_NUMBER = validators.instance_of((int, float))
_BOOL = validators.instance_of(bool)


@frozen
class DataConfig:
    """Scene sizes, the target-domain shift and split sizes."""

    height: int = field(default=48, validator=[_INT, _positive])
    width: int = field(default=64, validator=[_INT, _positive])
    num_points: int = field(default=2048, validator=[_INT, _positive])
    num_classes: int = field(default=6, validator=[_INT, _positive])
    shift: str = field(default="day-night", validator=_one_of(tuple(SHIFT_PRESETS)))
    source_train: int = field(default=400, validator=[_INT, _positive])
    target_train: int = field(default=400, validator=[_INT, _positive])
    target_val: int = field(default=100, validator=[_INT, _positive])
    target_test: int = field(default=100, validator=[_INT, _positive])
    seed: int = field(default=0, validator=_INT)
    restrict_to_valid: bool = field(default=True, validator=_BOOL)

    @property
    def dims(self) -> SceneDims:
        return SceneDims(
            height=self.height, width=self.width, num_points=self.num_points, num_classes=self.num_classes
        )

    @property
    def split_sizes(self) -> dict[str, int]:
        return {
            "source-train": self.source_train,
            "target-train": self.target_train,
            "target-val": self.target_val,
            "target-test": self.target_test,
        }


def _odd(instance: object, attribute: attrs.Attribute, value: int) -> None:
    if value < 1 or value % 2 == 0:
        raise ConfigError(f"{attribute.name} must be a positive odd integer, got {value}")


@frozen
class ModelConfig:
    feature_dim: int = field(default=16, validator=[_INT, _positive])
    patch_size: int = field(default=5, validator=[_INT, _odd])
    hidden_2d: tuple[int, ...] = field(default=(16, 16), converter=_int_tuple)
    hidden_3d: tuple[int, ...] = field(default=(32, 32), converter=_int_tuple)
    disc_hidden: tuple[int, ...] = field(default=(64, 64), converter=_int_tuple)
    freeze_offsets: bool = field(default=False, validator=_BOOL)


@frozen
class LossConfig:
    """Loss weights and switches. `mimic_2d`/`mimic_3d` weight the two sides of every cross-modal term."""

    seg: float = field(default=1.0, converter=float, validator=_non_negative)
    std_source: float = field(default=1.0, converter=float, validator=_non_negative)
    std_target: float = field(default=0.1, converter=float, validator=_non_negative)
    adv: float = field(default=0.001, converter=float, validator=_non_negative)
    pl: float = field(default=1.0, converter=float, validator=_non_negative)
    mimic_2d: float = field(default=1.0, converter=float, validator=_non_negative)
    mimic_3d: float = field(default=1.0, converter=float, validator=_non_negative)
    std_loss: str = field(default="minmax", validator=_one_of(STD_LOSSES))
    saturating_adv: bool = field(default=False, validator=_BOOL)


@frozen
class OptimConfig:
    lr: float = field(default=1e-3, converter=float, validator=_positive)
    beta1: float = field(default=0.9, converter=float, validator=_non_negative)
    beta2: float = field(default=0.999, converter=float, validator=_non_negative)
    eps: float = field(default=1e-8, converter=float, validator=_positive)
    poly_power: float = field(default=0.9, converter=float, validator=_non_negative)
    max_iters: int = field(default=3000, validator=[_INT, _positive])
    batch_size: int = field(default=8, validator=[_INT, _positive])


@frozen
class PseudoLabelConfig:
    threshold: float = field(default=0.9, converter=float, validator=_non_negative)
    rounds: int = field(default=1, validator=[_INT, _non_negative])
    iterations: int = field(default=1000, validator=[_INT, _positive])
    mode: str = field(default="global", validator=_one_of(PL_MODES))


@frozen
class EvalConfig:
    every: int = field(default=250, validator=[_INT, _positive])
    log_every: int = field(default=10, validator=[_INT, _positive])
    split: str = field(default="target-val", validator=_one_of(EVAL_SPLITS))


@frozen
class ExperimentConfig:
    """
    The full declarative description of one training run.

    `alignment` is only meaningful for the adversarial variants; left unset it
    resolves to option (b) there.
    """

    variant: str = field(default="dscml+cmal", validator=_one_of(VARIANTS))
    alignment: str | None = field(default=None, validator=validators.optional(_one_of(ALIGNMENTS)))
    seed: int = field(default=0, validator=_INT)
    data: DataConfig = field(factory=DataConfig)
    model: ModelConfig = field(factory=ModelConfig)
    loss: LossConfig = field(factory=LossConfig)
    optim: OptimConfig = field(factory=OptimConfig)
    pl: PseudoLabelConfig = field(factory=PseudoLabelConfig)
    eval: EvalConfig = field(factory=EvalConfig)

    def __attrs_post_init__(self) -> None:
        if self.alignment is not None and not self.uses_cmal:
            raise ConfigError(f"alignment option {self.alignment!r} requires an adversarial variant, not {self.variant!r}")

    @property
    def uses_cmal(self) -> bool:
        return "cmal" in self.variant

    @property
    def uses_pl(self) -> bool:
        return self.variant.endswith("+pl") and self.pl.rounds > 0

    @property
    def resolved_alignment(self) -> str | None:
        if not self.uses_cmal:
            return None
        return self.alignment or DEFAULT_ALIGNMENT


_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "pl": PseudoLabelConfig,
    "eval": EvalConfig,
}


def _build(cls: type, table: dict[str, Any], path: str) -> Any:
    known = {a.name for a in attrs.fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        dotted = ", ".join(f"{path}{key}" for key in unknown)
        raise ConfigError(f"unknown configuration key(s): {dotted}")
    kwargs: dict[str, Any] = {}
    for key, value in table.items():
        section = _SECTIONS.get(key) if cls is ExperimentConfig else None
        if section is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be a table")
            kwargs[key] = _build(section, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{path.rstrip('.') or 'top level'}] {e}") from e


def config_from_dict(table: dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, table, "")


def load_config(path: Path | None) -> ExperimentConfig:
    """
    Load an experiment configuration from a TOML file.

    Args:
        path: The file to read, or None for the defaults

    Raises:
        ConfigError: On unreadable files, syntax errors, unknown keys or invalid values
    """
    if path is None:
        return ExperimentConfig()
    try:
        with Path.open(path, "rb") as f:
            table = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(table)


def config_snapshot(config: ExperimentConfig) -> dict[str, Any]:
    return attrs.asdict(config)


def config_fingerprint(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON snapshot of a configuration."""
    canonical = json.dumps(config_snapshot(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@frozen
class AblationCell:
    """One row of an ablation table: a name and the overrides that define it."""

    name: str
    variant: str = field(validator=_one_of(VARIANTS))
    alignment: str | None = None
    std_loss: str | None = None
    freeze_offsets: bool | None = None

    def apply(self, base: ExperimentConfig, seed: int) -> ExperimentConfig:
        loss = base.loss if self.std_loss is None else attrs.evolve(base.loss, std_loss=self.std_loss)
        model = (
            base.model
            if self.freeze_offsets is None
            else attrs.evolve(base.model, freeze_offsets=self.freeze_offsets)
        )
        alignment = self.alignment if "cmal" in self.variant else None
        try:
            return attrs.evolve(
                base, variant=self.variant, alignment=alignment, seed=seed, loss=loss, model=model
            )
        except ConfigError as e:
            raise ConfigError(f"cell {self.name!r}: {e}") from e


@frozen
class AblationMatrix:
    base: ExperimentConfig
    seeds: tuple[int, ...]
    cells: tuple[AblationCell, ...]

    def __attrs_post_init__(self) -> None:
        if not self.cells:
            raise ConfigError("ablation matrix has no cells")
        if not self.seeds:
            raise ConfigError("ablation matrix has no seeds")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate cell names in ablation matrix: {names}")


_CELL_KEYS = {a.name for a in attrs.fields(AblationCell)}


def load_matrix(path: Path) -> AblationMatrix:
    """
    Load an ablation matrix.

    The file holds `seeds`, an optional `base` config path (relative to the
    matrix file) or an inline `[experiment]` table, and one `[[cell]]` table
    per row.
    """
    try:
        with Path.open(path, "rb") as f:
            table = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read ablation matrix {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e

    unknown = sorted(set(table) - {"base", "experiment", "seeds", "cell"})
    if unknown:
        raise ConfigError(f"unknown ablation matrix key(s): {', '.join(unknown)}")
    if "experiment" in table:
        base = config_from_dict(table["experiment"])
    elif "base" in table:
        base = load_config(path.parent / table["base"])
    else:
        base = ExperimentConfig()

    cells = []
    for i, cell in enumerate(table.get("cell", [])):
        extra = sorted(set(cell) - _CELL_KEYS)
        if extra:
            raise ConfigError(f"unknown key(s) in cell {i}: {', '.join(extra)}")
        if "variant" not in cell:
            raise ConfigError(f"cell {i} has no variant")
        cells.append(AblationCell(**{"name": cell["variant"], **cell}))
    seeds = tuple(int(s) for s in table.get("seeds", [base.seed]))
    return AblationMatrix(base=base, seeds=seeds, cells=tuple(cells))
