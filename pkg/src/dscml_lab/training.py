"""
Alternating generator/discriminator optimization, pseudo-labeling,
evaluation and the ablation runner.

The generator G is the pair of feature networks with their classifiers and
the offset head; the discriminators score prediction rows. Each iteration
takes one Adam step on G with the discriminators frozen, then (for the
adversarial variants) one Adam step on the discriminators with G frozen.
"""

import json
import logging
import re
from collections.abc import Callable, Iterator
from concurrent.futures import Future, ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Any

import attrs
import numpy as np
from attrs import define, field, frozen

from dscml_lab import __version__
from dscml_lab.config import (
    AblationCell,
    AblationMatrix,
    ExperimentConfig,
    OptimConfig,
    config_fingerprint,
    config_from_dict,
    config_snapshot,
)
from dscml_lab.dataset import SEALED_SPLIT, Dataset, Split, check_compatible
from dscml_lab.errors import ContractViolation, TrainingError
from dscml_lab.formatter import metrics_line
from dscml_lab.geometry import SceneSample, sample_at_points
from dscml_lab.losses import (
    IoUResult,
    PooledTriple,
    Sidedness,
    loss_adv,
    loss_cml,
    loss_dscml,
    loss_seg,
    loss_seg_2d,
    loss_seg_3d,
    loss_std_avg,
    miou,
)
from dscml_lab.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    Params,
    TensorParams,
    as_constants,
    classify,
    discriminate,
    forward_2d,
    forward_3d,
    init_discriminator,
    init_generator,
    predict_offsets,
)
from dscml_lab.pooling import reduce_patches, sample_patches
from dscml_lab.seeding import random_stream
from dscml_lab.tensor import Tape, Tensor, concatenate, detach, gather_rows, load_arrays, save_arrays

logger = logging.getLogger(__name__)

HEADS = ("2D", "3D", "Avg")

# discriminator -> (kind of source rows it sees, kind of target rows it sees)
PAIRINGS: dict[str, dict[str, tuple[str, str]]] = {
    "a": {"d1": ("2D", "2D"), "d2": ("3D", "3D")},
    "b": {"d1": ("2D", "3D"), "d2": ("3D", "2D")},
    "c": {"d1": ("2D", "2D"), "d2": ("3D", "3D"), "d3": ("2D", "3D"), "d4": ("3D", "2D")},
}

CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.jsonl"


def poly_lr(base_lr: float, iteration: int, max_iters: int, power: float) -> float:
    """lr * (1 - iteration / max_iters) ** power, reaching 0 at max_iters."""
    if iteration >= max_iters:
        return 0.0
    return base_lr * (1.0 - iteration / max_iters) ** power


@define(eq=False)
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(params: Params, grads: Params, state: AdamState, lr: float, optim: OptimConfig) -> Params:
    """
    One bias-corrected Adam update.

    Returns:
        The updated parameters; `state` is advanced in place

    Raises:
        TrainingError: If any gradient is not finite
    """
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ContractViolation(f"gradient for {name} has shape {grad.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at Adam step {state.step + 1}")
    state.step += 1
    b1, b2 = optim.beta1, optim.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    updated: Params = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * grad
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + optim.eps)
    return updated


@define(eq=False)
class TrainState:
    """
    Everything needed to continue a run.

    Batches are a pure function of (seed, round, iteration), so the iteration
    counter is the only random-stream state to carry.
    """

    iteration: int
    generator: Params
    discriminators: Params
    g_opt: AdamState
    d_opt: AdamState
    round: int = 0
    pseudo_labels: dict[int, np.ndarray] = field(factory=dict)


def generator_spec(config: ExperimentConfig) -> GeneratorSpec:
    return GeneratorSpec.build(
        feature_dim=config.model.feature_dim,
        num_classes=config.data.num_classes,
        patch_size=config.model.patch_size,
        hidden_2d=config.model.hidden_2d,
        hidden_3d=config.model.hidden_3d,
    )


def discriminator_prefixes(config: ExperimentConfig) -> tuple[str, ...]:
    alignment = config.resolved_alignment
    return () if alignment is None else tuple(PAIRINGS[alignment])


def init_state(config: ExperimentConfig) -> TrainState:
    """Fresh parameters drawn from named streams of the master seed."""
    generator = init_generator(generator_spec(config), random_stream(config.seed, "init/generator"))
    spec = DiscriminatorSpec(num_classes=config.data.num_classes, hidden=config.model.disc_hidden)
    discriminators: Params = {}
    for prefix in discriminator_prefixes(config):
        discriminators.update(init_discriminator(spec, random_stream(config.seed, f"init/{prefix}"), prefix))
    return TrainState(
        iteration=0,
        generator=generator,
        discriminators=discriminators,
        g_opt=AdamState.zeros_like(generator),
        d_opt=AdamState.zeros_like(discriminators),
    )


@lru_cache(maxsize=256)
def _epoch_permutation(seed: int, stream: str, size: int, epoch: int) -> np.ndarray:
    return random_stream(seed, f"{stream}/{epoch}").permutation(size)


def batch_indices(seed: int, stream: str, size: int, batch_size: int, step: int) -> np.ndarray:
    """Sample indices of batch `step`, walking a fresh permutation each epoch."""
    positions = step * batch_size + np.arange(batch_size)
    epochs, offsets = np.divmod(positions, size)
    return np.array([_epoch_permutation(seed, stream, size, int(e))[o] for e, o in zip(epochs, offsets, strict=True)])


@frozen(eq=False)
class SampleOutputs:
    """Predictions for one sample; `triple` and `p3d` hold the rows of valid points."""

    index: int
    triple: PooledTriple
    p3d: Tensor
    p3d_all: Tensor
    valid_index: np.ndarray


def readout_2d(feat_2d: Tensor, centers: np.ndarray, params: TensorParams, config: ExperimentConfig) -> PooledTriple:
    """
    Read the 2D branch out at the projected points.

    baseline and cml sample the nearest pixel, scml pools the fixed square
    patch, the dscml variants pool the deformable patch.
    """
    variant = config.variant
    if variant in ("baseline", "cml"):
        sampled = sample_at_points(feat_2d, centers, np.ones(centers.shape[0], dtype=bool))
        return PooledTriple.degenerate(classify(sampled, params, "cls2d"))
    size = config.model.patch_size
    if variant == "scml":
        offsets = None
    elif config.model.freeze_offsets:
        offsets = Tensor(np.zeros((centers.shape[0], size * size, 2)))
    else:
        offsets = predict_offsets(feat_2d, centers, params)
    samples = sample_patches(feat_2d, centers, offsets, size)
    scores = {mode: classify(reduce_patches(samples, mode), params, "cls2d") for mode in ("max", "min", "avg")}
    return PooledTriple(max_scores=scores["max"], min_scores=scores["min"], avg_scores=scores["avg"])


def forward_sample(
    sample: SceneSample,
    index: int,
    params: TensorParams,
    config: ExperimentConfig,
    feat_2d: Tensor | None = None,
) -> SampleOutputs | None:
    """
    Both branches on one sample, or None when no point projects into the image.

    `feat_2d` is the sample's dense 2D feature map when it was computed as
    part of a batch.
    """
    valid_index = np.flatnonzero(sample.valid)
    if valid_index.size == 0:
        logger.warning("skipping %s sample %d: no valid points", sample.domain, index)
        return None
    if feat_2d is None:
        feat_2d = forward_2d(sample.image, params)
    triple = readout_2d(feat_2d, sample.proj[valid_index], params, config)
    p3d_all = classify(forward_3d(sample.points, params), params, "cls3d")
    return SampleOutputs(
        index=index,
        triple=triple,
        p3d=gather_rows(p3d_all, valid_index),
        p3d_all=p3d_all,
        valid_index=valid_index,
    )


def forward_batch(split: Split, indices: np.ndarray, params: TensorParams, config: ExperimentConfig) -> list[SampleOutputs]:
    """Forward a batch; the 2D network runs once over the stacked images."""
    samples = [split.samples[i] for i in indices]
    if not samples:
        return []
    feats = forward_2d(np.stack([s.image for s in samples]), params)
    outputs = (
        forward_sample(sample, int(i), params, config, feat_2d=feats[j])
        for j, (i, sample) in enumerate(zip(indices, samples, strict=True))
    )
    return [out for out in outputs if out is not None]


def _average(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _sides(config: ExperimentConfig) -> Sidedness:
    return Sidedness(to_2d=config.loss.mimic_2d, to_3d=config.loss.mimic_3d)


def cross_modal_term(out: SampleOutputs, config: ExperimentConfig) -> Tensor | None:
    """The sample's sparse-to-dense (or point-to-pixel) consistency loss for the variant."""
    if config.variant == "baseline":
        return None
    sides = _sides(config)
    if config.variant == "cml":
        return loss_cml(out.triple.avg_scores, out.p3d, sides)
    std = config.loss.std_loss
    if std == "none":
        return None
    if std == "avg":
        return loss_std_avg(out.triple, out.p3d, sides)
    return loss_dscml(out.triple, out.p3d, sides)


def segmentation_term(out: SampleOutputs, labels: np.ndarray, restrict_to_valid: bool) -> Tensor:
    if restrict_to_valid:
        return loss_seg(out.triple.avg_scores, out.p3d, labels[out.valid_index])
    return loss_seg_2d(out.triple.avg_scores, labels[out.valid_index]) + loss_seg_3d(out.p3d_all, labels)


def _pseudo_term(out: SampleOutputs, pseudo_labels: dict[int, np.ndarray]) -> Tensor | None:
    labels = pseudo_labels.get(out.index)
    if labels is None:
        return None
    chosen = labels[out.valid_index]
    rows = np.flatnonzero(chosen >= 0)
    if rows.size == 0:
        return None
    return loss_seg(gather_rows(out.triple.avg_scores, rows), gather_rows(out.p3d, rows), chosen[rows])


def _rows_by_kind(outputs: list[SampleOutputs]) -> dict[str, Tensor]:
    return {
        "2D": concatenate([out.triple.avg_scores for out in outputs]),
        "3D": concatenate([out.p3d for out in outputs]),
    }


@frozen(eq=False)
class PredictionRows:
    """Detached 2D and 3D prediction rows of one source and one target batch, keyed "2D"/"3D"."""

    source: dict[str, Tensor]
    target: dict[str, Tensor]

    @classmethod
    def of(cls, rows_s: dict[str, Tensor], rows_t: dict[str, Tensor]) -> "PredictionRows":
        return cls(
            source={kind: detach(rows) for kind, rows in rows_s.items()},
            target={kind: detach(rows) for kind, rows in rows_t.items()},
        )


@frozen(eq=False)
class GeneratorStep:
    """Loss values of a generator step and the rows the discriminators train on next."""

    losses: dict[str, float]
    rows: PredictionRows | None = None


def _generator_pass(
    params: TensorParams,
    disc_params: TensorParams,
    source: Split,
    target: Split,
    source_index: np.ndarray,
    target_index: np.ndarray,
    config: ExperimentConfig,
    pseudo_labels: dict[int, np.ndarray] | None,
) -> tuple[Tensor | None, dict[str, Tensor], PredictionRows | None]:
    weights = config.loss
    out_s = forward_batch(source, source_index, params, config)
    terms: dict[str, Tensor] = {}
    if not out_s:
        return None, terms, None
    for out in out_s:
        if source.samples[out.index].point_labels is None:
            raise ContractViolation(f"source sample {out.index} has no labels")
    seg = _average(
        [
            segmentation_term(out, source.samples[out.index].point_labels, config.data.restrict_to_valid)  # type: ignore[arg-type]
            for out in out_s
        ]
    )
    terms["seg"] = seg  # type: ignore[assignment]
    weighted = [seg * weights.seg]
    rows = None

    std_source = _average([t for t in (cross_modal_term(out, config) for out in out_s) if t is not None])
    if std_source is not None:
        terms["std_source"] = std_source
        weighted.append(std_source * weights.std_source)

    if config.variant != "baseline":
        out_t = forward_batch(target, target_index, params, config)
        std_target = _average([t for t in (cross_modal_term(out, config) for out in out_t) if t is not None])
        if std_target is not None:
            terms["std_target"] = std_target
            weighted.append(std_target * weights.std_target)

        if out_t and config.uses_cmal and weights.adv > 0:
            rows_s, rows_t = _rows_by_kind(out_s), _rows_by_kind(out_t)
            rows = PredictionRows.of(rows_s, rows_t)
            g_terms = []
            for prefix, (kind_s, kind_t) in PAIRINGS[config.resolved_alignment].items():  # type: ignore[index]
                scores_s, _ = discriminate(rows_s[kind_s], disc_params, prefix)
                scores_t, _ = discriminate(rows_t[kind_t], disc_params, prefix)
                _, g_loss = loss_adv(scores_s, scores_t, saturating=weights.saturating_adv)
                g_terms.append(g_loss)
            adv = g_terms[0]
            for g_loss in g_terms[1:]:
                adv = adv + g_loss
            terms["adv_g"] = adv
            weighted.append(adv * weights.adv)

        if pseudo_labels and out_t:
            pl = _average([t for t in (_pseudo_term(out, pseudo_labels) for out in out_t) if t is not None])
            if pl is not None:
                terms["pl"] = pl
                weighted.append(pl * weights.pl)

    total = weighted[0]
    for term in weighted[1:]:
        total = total + term
    return total, terms, rows


def generator_objective(
    params: TensorParams,
    disc_params: TensorParams,
    source: Split,
    target: Split,
    source_index: np.ndarray,
    target_index: np.ndarray,
    config: ExperimentConfig,
    pseudo_labels: dict[int, np.ndarray] | None = None,
) -> tuple[Tensor | None, dict[str, Tensor]]:
    """
    The weighted generator loss of one source/target batch pair.

    Returns:
        total: The weighted sum, or None when every sample was skipped
        terms: The unweighted terms that went into it
    """
    total, terms, _ = _generator_pass(
        params, disc_params, source, target, source_index, target_index, config, pseudo_labels
    )
    return total, terms


def generator_step(
    state: TrainState,
    source: Split,
    target: Split,
    source_index: np.ndarray,
    target_index: np.ndarray,
    config: ExperimentConfig,
    lr: float,
) -> GeneratorStep:
    """
    One Adam step on G with the discriminators frozen.

    The returned rows are the step's own predictions, detached, so the
    discriminator step that follows needs no second forward pass.
    """
    with Tape() as tape:
        params = tape.watch(state.generator)
        total, terms, rows = _generator_pass(
            params,
            as_constants(state.discriminators),
            source,
            target,
            source_index,
            target_index,
            config,
            state.pseudo_labels,
        )
    if total is None:
        logger.warning("iteration %d: every source sample was skipped; no generator update", state.iteration)
        return GeneratorStep(losses={})
    grads = tape.backward(total).collect(params)
    state.generator = adam_step(state.generator, grads, state.g_opt, lr, config.optim)
    losses = {name: term.item() for name, term in terms.items()}
    losses["total"] = total.item()
    return GeneratorStep(losses=losses, rows=rows)


def discriminator_step(
    state: TrainState,
    source: Split,
    target: Split,
    source_index: np.ndarray,
    target_index: np.ndarray,
    config: ExperimentConfig,
    lr: float,
    rows: PredictionRows | None = None,
) -> dict[str, float]:
    """
    One Adam step on the discriminators with G frozen.

    Trains on `rows` when the generator step supplied them, otherwise on a
    fresh forward pass of the current G.

    Returns:
        Per-discriminator d_loss and mean source/target scores
    """
    if not config.uses_cmal:
        raise ContractViolation(f"variant {config.variant!r} has no discriminators")
    if rows is None:
        frozen_g = as_constants(state.generator)
        out_s = forward_batch(source, source_index, frozen_g, config)
        out_t = forward_batch(target, target_index, frozen_g, config)
        if not out_s or not out_t:
            logger.warning("iteration %d: empty batch; no discriminator update", state.iteration)
            return {}
        rows = PredictionRows.of(_rows_by_kind(out_s), _rows_by_kind(out_t))

    stats: dict[str, float] = {}
    with Tape() as tape:
        params = tape.watch(state.discriminators)
        d_losses = []
        for prefix, (kind_s, kind_t) in PAIRINGS[config.resolved_alignment].items():  # type: ignore[index]
            scores_s, rho_s = discriminate(rows.source[kind_s], params, prefix)
            scores_t, rho_t = discriminate(rows.target[kind_t], params, prefix)
            d_loss, _ = loss_adv(scores_s, scores_t, saturating=config.loss.saturating_adv)
            d_losses.append(d_loss)
            stats[f"{prefix}.d_loss"] = d_loss.item()
            stats[f"{prefix}.rho_source"] = rho_s.item()
            stats[f"{prefix}.rho_target"] = rho_t.item()
        total = d_losses[0]
        for d_loss in d_losses[1:]:
            total = total + d_loss
    grads = tape.backward(total).collect(params)
    state.discriminators = adam_step(state.discriminators, grads, state.d_opt, lr, config.optim)
    return stats


@frozen(eq=False)
class EvalResult:
    split: str
    heads: dict[str, IoUResult]

    def miou(self, head: str) -> float:
        return self.heads[head].miou


def head_predictions(out: SampleOutputs) -> dict[str, np.ndarray]:
    """Argmax labels of the 2D, 3D and Avg heads for the sample's valid points."""
    p2d = out.triple.avg_scores.data
    p3d = out.p3d.data
    return {
        "2D": p2d.argmax(axis=1),
        "3D": p3d.argmax(axis=1),
        "Avg": (0.5 * (p2d + p3d)).argmax(axis=1),
    }


def evaluate(state: TrainState, dataset: Dataset, split_name: str, config: ExperimentConfig, unseal: bool = False) -> EvalResult:
    """
    mIoU of the three heads over the valid points of a labelled split.

    The sealed split is only evaluated with `unseal`, which reads its labels
    through the dataset's vault.
    """
    if split_name == SEALED_SPLIT and not unseal:
        raise ContractViolation(f"{SEALED_SPLIT} labels are sealed")
    split = dataset.unsealed(split_name) if unseal else dataset.split(split_name)
    params = as_constants(state.generator)
    predicted: dict[str, list[np.ndarray]] = {head: [] for head in HEADS}
    truth: list[np.ndarray] = []
    for i, sample in enumerate(split.samples):
        if sample.point_labels is None:
            raise ContractViolation(f"{split_name} sample {i} has no labels")
        out = forward_sample(sample, i, params, config)
        if out is None:
            continue
        for head, labels in head_predictions(out).items():
            predicted[head].append(labels)
        truth.append(sample.point_labels[out.valid_index])
    if not truth:
        raise ContractViolation(f"{split_name}: no valid points to evaluate")
    true_labels = np.concatenate(truth)
    num_classes = config.data.num_classes
    heads = {head: miou(np.concatenate(predicted[head]), true_labels, num_classes) for head in HEADS}
    return EvalResult(split=split_name, heads=heads)


@frozen(eq=False)
class PseudoLabels:
    """Per-sample labels (-1 where no label was assigned) and the class thresholds used."""

    labels: dict[int, np.ndarray]
    thresholds: np.ndarray
    selected: int
    candidates: int

    @property
    def ratio(self) -> float:
        return self.selected / self.candidates if self.candidates else 0.0


def pseudo_label_generate(state: TrainState, split: Split, config: ExperimentConfig) -> PseudoLabels:
    """
    Label confident target points with the argmax of the Avg head.

    In "global" mode a point qualifies when its ensemble confidence reaches
    the threshold; in "class-median" mode the threshold of each class is
    lowered to the median confidence of the points predicted as that class.
    """
    params = as_constants(state.generator)
    num_classes = config.data.num_classes
    outputs: list[tuple[SceneSample, SampleOutputs]] = []
    for i, sample in enumerate(split.samples):
        out = forward_sample(sample, i, params, config)
        if out is not None:
            outputs.append((sample, out))
    ensembles = [0.5 * (out.triple.avg_scores.data + out.p3d.data) for _, out in outputs]
    thresholds = np.full(num_classes, config.pl.threshold)
    if config.pl.mode == "class-median" and ensembles:
        stacked = np.concatenate(ensembles)
        predicted, confidence = stacked.argmax(axis=1), stacked.max(axis=1)
        for c in range(num_classes):
            of_class = confidence[predicted == c]
            if of_class.size:
                thresholds[c] = min(float(np.median(of_class)), config.pl.threshold)

    labels: dict[int, np.ndarray] = {}
    selected = candidates = 0
    for (sample, out), ensemble in zip(outputs, ensembles, strict=True):
        predicted, confidence = ensemble.argmax(axis=1), ensemble.max(axis=1)
        keep = confidence >= thresholds[predicted]
        point_labels = np.full(sample.num_points, -1, dtype=np.int64)
        point_labels[out.valid_index[keep]] = predicted[keep]
        labels[out.index] = point_labels
        selected += int(keep.sum())
        candidates += keep.size
    result = PseudoLabels(labels=labels, thresholds=thresholds, selected=selected, candidates=candidates)
    if selected == 0:
        logger.warning("pseudo-labeling selected no points at threshold %s", config.pl.threshold)
    else:
        logger.info("pseudo-labeling selected %d of %d points (%.3f)", selected, candidates, result.ratio)
    return result


@frozen
class MetricsRecord:
    iteration: int
    round: int
    lr: float
    losses: dict[str, float]
    discriminators: dict[str, float]
    miou: dict[str, float] | None
    sealed_label_reads: int

    def as_dict(self) -> dict[str, Any]:
        return attrs.asdict(self)


# Checkpoints: the tensor-module array codec plus the configuration and its fingerprint.


def save_checkpoint(path: Path, state: TrainState, config: ExperimentConfig) -> None:
    arrays: dict[str, np.ndarray] = {}
    for group, params in (
        ("generator", state.generator),
        ("discriminators", state.discriminators),
        ("g_opt.m", state.g_opt.m),
        ("g_opt.v", state.g_opt.v),
        ("d_opt.m", state.d_opt.m),
        ("d_opt.v", state.d_opt.v),
    ):
        for name, value in params.items():
            arrays[f"{group}/{name}"] = value
    for index, labels in state.pseudo_labels.items():
        arrays[f"pseudo_labels/{index:05d}"] = labels
    extra = {
        "version": __version__,
        "fingerprint": config_fingerprint(config),
        "config": config_snapshot(config),
        "iteration": state.iteration,
        "round": state.round,
        "g_step": state.g_opt.step,
        "d_step": state.d_opt.step,
    }
    save_arrays(path, arrays, extra)
    logger.debug("checkpoint at iteration %d written to %s", state.iteration, path)


def load_checkpoint(path: Path, config: ExperimentConfig | None = None) -> tuple[TrainState, ExperimentConfig]:
    """
    Read a checkpoint and the configuration it was trained with.

    Raises:
        TrainingError: If the file is missing or was written for a different configuration
    """
    if not path.is_file():
        raise TrainingError(f"no checkpoint at {path}")
    arrays, extra = load_arrays(path)
    if config is not None and extra["fingerprint"] != config_fingerprint(config):
        raise TrainingError(f"checkpoint {path} was written for a different configuration")
    stored = config_from_dict(extra["config"])
    groups: dict[str, Params] = {}
    for key, value in arrays.items():
        group, name = key.split("/", 1)
        groups.setdefault(group, {})[name] = value
    state = TrainState(
        iteration=extra["iteration"],
        generator=groups.get("generator", {}),
        discriminators=groups.get("discriminators", {}),
        g_opt=AdamState(m=groups.get("g_opt.m", {}), v=groups.get("g_opt.v", {}), step=extra["g_step"]),
        d_opt=AdamState(m=groups.get("d_opt.m", {}), v=groups.get("d_opt.v", {}), step=extra["d_step"]),
        round=extra["round"],
        pseudo_labels={int(k): v for k, v in groups.get("pseudo_labels", {}).items()},
    )
    return state, stored


@frozen(eq=False)
class TrainResult:
    state: TrainState
    records: list[MetricsRecord]
    final: EvalResult | None


def _phases(config: ExperimentConfig) -> Iterator[tuple[int, int, int]]:
    """(round, first iteration, length) of the main phase and every pseudo-label round."""
    yield 0, 0, config.optim.max_iters
    if config.uses_pl:
        for r in range(1, config.pl.rounds + 1):
            yield r, config.optim.max_iters + (r - 1) * config.pl.iterations, config.pl.iterations


def _truncate_metrics(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines() if json.loads(line)["iteration"] <= iteration]
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def train(
    config: ExperimentConfig,
    dataset: Dataset,
    run_dir: Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> TrainResult:
    """
    Train one configuration end to end.

    With a run directory, metrics are appended to metrics.jsonl and a
    checkpoint is written at every evaluation point. `resume` continues from
    that checkpoint, dropping metrics recorded after it. `stop_after` ends the
    run (with a checkpoint) once that many iterations are done.
    """
    check_compatible(dataset, config.data)
    source, target = dataset.split("source-train"), dataset.split("target-train")
    checkpoint = run_dir / CHECKPOINT_NAME if run_dir else None
    metrics_path = run_dir / METRICS_NAME if run_dir else None

    state = None
    if resume and checkpoint is not None and checkpoint.is_file():
        state, _ = load_checkpoint(checkpoint, config)
        _truncate_metrics(metrics_path, state.iteration)  # type: ignore[arg-type]
        logger.info("resuming from iteration %d", state.iteration)
    if state is None:
        state = init_state(config)
        if metrics_path is not None:
            metrics_path.parent.mkdir(parents=True, exist_ok=True)
            metrics_path.write_text("", encoding="utf-8")

    records: list[MetricsRecord] = []
    final: EvalResult | None = None

    def emit(record: MetricsRecord) -> None:
        records.append(record)
        if metrics_path is not None:
            with Path.open(metrics_path, "a", encoding="utf-8") as f:
                f.write(metrics_line(record.as_dict()) + "\n")
        if on_record is not None:
            on_record(record)

    for round_, start, length in _phases(config):
        if state.round > round_:
            continue
        if round_ > state.round:
            pseudo = pseudo_label_generate(state, target, config)
            if pseudo.selected == 0:
                logger.warning("skipping pseudo-label round %d", round_)
                break
            state.round = round_
            state.pseudo_labels = pseudo.labels
            state.g_opt = AdamState.zeros_like(state.generator)
            state.d_opt = AdamState.zeros_like(state.discriminators)

        stream = f"round{round_}"
        while state.iteration < start + length:
            if stop_after is not None and state.iteration >= stop_after:
                if checkpoint is not None:
                    save_checkpoint(checkpoint, state, config)
                return TrainResult(state=state, records=records, final=None)
            local = state.iteration - start
            lr = poly_lr(config.optim.lr, local, length, config.optim.poly_power)
            bs = config.optim.batch_size
            index_s = batch_indices(config.seed, f"{stream}/source", len(source), bs, local)
            index_t = batch_indices(config.seed, f"{stream}/target", len(target), bs, local)
            step = generator_step(state, source, target, index_s, index_t, config, lr)
            losses = step.losses
            disc: dict[str, float] = {}
            if config.uses_cmal and config.loss.adv > 0:
                disc = discriminator_step(state, source, target, index_s, index_t, config, lr, rows=step.rows)
            state.iteration += 1

            at_eval = state.iteration % config.eval.every == 0 or state.iteration == start + length
            if at_eval or state.iteration % config.eval.log_every == 0:
                scores = None
                if at_eval:
                    final = evaluate(state, dataset, config.eval.split, config)
                    scores = {head: final.miou(head) for head in HEADS}
                    logger.info(
                        "iteration %d: mIoU 2D %.4f 3D %.4f Avg %.4f",
                        state.iteration,
                        scores["2D"],
                        scores["3D"],
                        scores["Avg"],
                    )
                emit(
                    MetricsRecord(
                        iteration=state.iteration,
                        round=state.round,
                        lr=lr,
                        losses=losses,
                        discriminators=disc,
                        miou=scores,
                        sealed_label_reads=dataset.vault.reads,
                    )
                )
                if at_eval and checkpoint is not None:
                    save_checkpoint(checkpoint, state, config)

    if final is None:
        final = evaluate(state, dataset, config.eval.split, config)
    return TrainResult(state=state, records=records, final=final)


# Ablation runner


@frozen
class CellOutcome:
    cell: str
    seed: int
    miou: dict[str, float] | None
    error: str | None = None


@frozen(eq=False)
class AblationResult:
    cells: tuple[AblationCell, ...]
    seeds: tuple[int, ...]
    outcomes: tuple[CellOutcome, ...]

    def per_seed(self, cell: str, head: str) -> list[float | None]:
        by_seed = {o.seed: o for o in self.outcomes if o.cell == cell}
        return [by_seed[s].miou[head] if by_seed[s].miou else None for s in self.seeds]  # type: ignore[index]

    def mean(self, cell: str, head: str) -> float:
        values = [v for v in self.per_seed(cell, head) if v is not None]
        return float(np.mean(values)) if values else float("nan")


def cell_directory(root: Path, cell: str, seed: int) -> Path:
    slug = re.sub(r"[^A-Za-z0-9.+-]+", "_", cell).strip("_")
    return root / slug / f"seed-{seed}"


def _failed(name: str, seed: int, e: BaseException) -> CellOutcome:
    logger.error("ablation cell %s seed %d failed: %s", name, seed, e)
    return CellOutcome(cell=name, seed=seed, miou=None, error=f"{type(e).__name__}: {e}")


def _run_cell(name: str, seed: int, config: ExperimentConfig, dataset: Dataset, run_dir: Path | None) -> CellOutcome:
    try:
        result = train(config, dataset, run_dir=run_dir)
    except Exception as e:
        return _failed(name, seed, e)
    final = result.final
    return CellOutcome(cell=name, seed=seed, miou={head: final.miou(head) for head in HEADS})  # type: ignore[union-attr]


def _collect(job: tuple, future: Future) -> CellOutcome:
    name, seed = job[0], job[1]
    try:
        return future.result()
    except Exception as e:
        # the worker process died, e.g. BrokenProcessPool
        return _failed(name, seed, e)


def run_ablation(matrix: AblationMatrix, dataset: Dataset, workers: int = 1, out_dir: Path | None = None) -> AblationResult:
    """
    Train every (cell, seed) combination and collect the final mIoU per head.

    Cells are independent; with more than one worker they run in separate
    processes and give the same numbers as a serial run. A failing cell is
    logged and recorded, the others continue.
    """
    jobs = []
    for cell in matrix.cells:
        for seed in matrix.seeds:
            config = cell.apply(matrix.base, seed)
            run_dir = cell_directory(out_dir, cell.name, seed) if out_dir else None
            jobs.append((cell.name, seed, config, dataset, run_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, *job) for job in jobs]
            outcomes = tuple(_collect(job, future) for job, future in zip(jobs, futures, strict=True))
    else:
        outcomes = tuple(_run_cell(*job) for job in jobs)
    return AblationResult(cells=matrix.cells, seeds=matrix.seeds, outcomes=outcomes)
