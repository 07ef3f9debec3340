"""
Dataset splits and their on-disk format.

A dataset directory holds `manifest.json` (dims, class names, shift
parameters, seeds, split sizes) and one subdirectory per split with one
array file pair per sample (see `tensor.save_arrays`). The labels of the
unlabeled target split live in a separate sealed directory and are only
reachable through a `LabelVault`, which counts every read.
"""

import json
import logging
from pathlib import Path
from typing import Any

import attrs
import numpy as np
from attrs import define, field, frozen

from dscml_lab.config import DataConfig
from dscml_lab.errors import ConfigError, ContractViolation
from dscml_lab.geometry import (
    DomainShiftConfig,
    SceneDims,
    SceneSample,
    class_names,
    generate_scene,
    shift_preset,
)
from dscml_lab.seeding import random_stream
from dscml_lab.tensor import load_arrays, save_arrays

logger = logging.getLogger(__name__)

SPLITS = ("source-train", "target-train", "target-val", "target-test")
SEALED_SPLIT = "target-train"
FORMAT_VERSION = 1


def split_domain(name: str) -> str:
    return "source" if name.startswith("source") else "target"


@frozen(eq=False)
class Split:
    name: str
    samples: tuple[SceneSample, ...]

    @property
    def domain(self) -> str:
        return split_domain(self.name)

    @property
    def labelled(self) -> bool:
        return all(s.point_labels is not None for s in self.samples)

    def __len__(self) -> int:
        return len(self.samples)


@define(eq=False)
class LabelVault:
    """Sealed per-sample labels of one split; every read increments `reads`."""

    point_labels: list[np.ndarray] = field(repr=False)
    image_labels: list[np.ndarray] = field(repr=False)
    reads: int = 0

    def read(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        self.reads += 1
        logger.debug("sealed label read %d (sample %d)", self.reads, index)
        return self.point_labels[index], self.image_labels[index]

    def __len__(self) -> int:
        return len(self.point_labels)


@define(eq=False)
class Dataset:
    dims: SceneDims
    class_names: tuple[str, ...]
    shift_name: str
    shift: DomainShiftConfig
    seed: int
    splits: dict[str, Split]
    vault: LabelVault

    def split(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise ContractViolation(f"unknown split {name!r}; expected one of {SPLITS}") from None

    def unsealed(self, name: str) -> Split:
        """A split with labels; the sealed split's labels come through the vault."""
        split = self.split(name)
        if name != SEALED_SPLIT:
            return split
        samples = []
        for i, sample in enumerate(split.samples):
            point_labels, image_labels = self.vault.read(i)
            samples.append(attrs.evolve(sample, point_labels=point_labels, image_labels=image_labels))
        return Split(name=name, samples=tuple(samples))


def layout_seeds(seed: int, split: str, count: int) -> np.ndarray:
    return random_stream(seed, f"layouts/{split}").integers(0, 2**31 - 1, size=count)


def generate_dataset(data: DataConfig) -> Dataset:
    """
    Generate all four splits.

    Source scenes carry no shift; target scenes carry the configured preset.
    The labels of the unlabeled target split are moved into the vault.
    """
    dims = data.dims
    shift = shift_preset(data.shift)
    splits: dict[str, Split] = {}
    sealed_points: list[np.ndarray] = []
    sealed_images: list[np.ndarray] = []
    for name, count in data.split_sizes.items():
        domain = split_domain(name)
        domain_shift = DomainShiftConfig() if domain == "source" else shift
        samples = []
        for layout_seed in layout_seeds(data.seed, name, count):
            sample = generate_scene(int(layout_seed), domain_shift, dims, domain=domain)
            if name == SEALED_SPLIT:
                sealed_points.append(sample.point_labels)  # type: ignore[arg-type]
                sealed_images.append(sample.image_labels)  # type: ignore[arg-type]
                sample = attrs.evolve(sample, point_labels=None, image_labels=None)
            samples.append(sample)
        splits[name] = Split(name=name, samples=tuple(samples))
        logger.info("generated %s: %d scenes", name, count)
    return Dataset(
        dims=dims,
        class_names=class_names(dims.num_classes),
        shift_name=data.shift,
        shift=shift,
        seed=data.seed,
        splits=splits,
        vault=LabelVault(point_labels=sealed_points, image_labels=sealed_images),
    )


def _sample_file(root: Path, split: str, index: int) -> Path:
    return root / split / f"{index:05d}.json"


def _sealed_file(root: Path, index: int) -> Path:
    return root / f"{SEALED_SPLIT}.sealed" / f"{index:05d}.json"


def _sample_arrays(sample: SceneSample) -> dict[str, np.ndarray]:
    arrays = {"image": sample.image, "points": sample.points, "proj": sample.proj, "valid": sample.valid}
    if sample.point_labels is not None:
        arrays["point_labels"] = sample.point_labels
    if sample.image_labels is not None:
        arrays["image_labels"] = sample.image_labels
    return arrays


def dataset_manifest(dataset: Dataset) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "dims": attrs.asdict(dataset.dims),
        "class_names": list(dataset.class_names),
        "shift": {"name": dataset.shift_name, **attrs.asdict(dataset.shift)},
        "seed": dataset.seed,
        "splits": {name: len(split) for name, split in dataset.splits.items()},
        "array_order": {
            "image": "row-major (H, W, 3) float64",
            "image_labels": "row-major (H, W) int64",
            "points": "row-major (N, 3) float64",
            "point_labels": "(N,) int64",
            "proj": "row-major (N, 2) float64, (u, v)",
            "valid": "(N,) uint8",
        },
    }


def write_dataset(dataset: Dataset, root: Path) -> None:
    """Write every split and the sealed labels below `root`."""
    root.mkdir(parents=True, exist_ok=True)
    for name, split in dataset.splits.items():
        for i, sample in enumerate(split.samples):
            save_arrays(_sample_file(root, name, i), _sample_arrays(sample), {"domain": sample.domain})
    for i in range(len(dataset.vault)):
        point_labels, image_labels = dataset.vault.point_labels[i], dataset.vault.image_labels[i]
        save_arrays(_sealed_file(root, i), {"point_labels": point_labels, "image_labels": image_labels})
    manifest = json.dumps(dataset_manifest(dataset), indent=2, sort_keys=True)
    (root / "manifest.json").write_text(manifest + "\n", encoding="utf-8")
    logger.info("wrote dataset to %s", root)


def read_dataset(root: Path) -> Dataset:
    """
    Read a dataset written by `write_dataset`.

    Raises:
        ConfigError: If the directory holds no dataset manifest
    """
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"no dataset at {root} (missing manifest.json); run gen-data first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{manifest_path}: unsupported dataset format {manifest.get('format_version')}")
    shift_fields = dict(manifest["shift"])
    shift_name = shift_fields.pop("name")
    splits: dict[str, Split] = {}
    for name, count in manifest["splits"].items():
        samples = []
        for i in range(count):
            arrays, extra = load_arrays(_sample_file(root, name, i))
            samples.append(
                SceneSample(
                    image=arrays["image"],
                    image_labels=arrays.get("image_labels"),
                    points=arrays["points"],
                    point_labels=arrays.get("point_labels"),
                    proj=arrays["proj"],
                    valid=arrays["valid"],
                    domain=extra["domain"],
                )
            )
        splits[name] = Split(name=name, samples=tuple(samples))
    sealed_points, sealed_images = [], []
    for i in range(manifest["splits"].get(SEALED_SPLIT, 0)):
        arrays, _ = load_arrays(_sealed_file(root, i))
        sealed_points.append(arrays["point_labels"])
        sealed_images.append(arrays["image_labels"])
    return Dataset(
        dims=SceneDims(**manifest["dims"]),
        class_names=tuple(manifest["class_names"]),
        shift_name=shift_name,
        shift=DomainShiftConfig(**shift_fields),
        seed=manifest["seed"],
        splits=splits,
        vault=LabelVault(point_labels=sealed_points, image_labels=sealed_images),
    )


def check_compatible(dataset: Dataset, data: DataConfig) -> None:
    """Raise ConfigError when a dataset on disk was not generated from `data`."""
    if dataset.dims != data.dims:
        raise ConfigError(f"dataset dims {dataset.dims} differ from configured {data.dims}")
    if dataset.shift_name != data.shift or dataset.seed != data.seed:
        raise ConfigError(
            f"dataset was generated with shift {dataset.shift_name!r} seed {dataset.seed}, "
            f"configured {data.shift!r} seed {data.seed}"
        )
    sizes = {name: len(split) for name, split in dataset.splits.items()}
    if sizes != data.split_sizes:
        raise ConfigError(f"dataset split sizes {sizes} differ from configured {data.split_sizes}")
