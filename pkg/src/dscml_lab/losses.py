"""
Objectives and metrics: KL distance, the cross-modal consistency losses,
segmentation loss, adversarial losses and mIoU.

Every probability-consuming loss goes through `tensor.log`, whose argument is
clamped at LOG_FLOOR; that clamp is also what makes 0 * log 0 evaluate to 0.
"""

import numpy as np
from attrs import field, frozen, validators

from dscml_lab.errors import ContractViolation
from dscml_lab.tensor import Tensor, grad_scale, log, mean, mul, reduce_sum, take

SIMPLEX_TOL = 1e-6

MODALITIES = ("2D", "3D")
DOMAINS = ("source", "target")


def _check_simplex(name: str, rows: Tensor) -> None:
    sums = rows.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL) or np.any(rows.data < -SIMPLEX_TOL):
        raise ContractViolation(f"{name}: rows are not on the probability simplex")


@frozen(eq=False)
class PredictionMap:
    """Probability rows together with what they describe."""

    rows: Tensor
    domain: str = field(validator=validators.in_(DOMAINS))
    modality: str = field(validator=validators.in_(MODALITIES))
    alignment: np.ndarray | None = None

    def __attrs_post_init__(self) -> None:
        _check_simplex(f"{self.domain}/{self.modality}", self.rows)

    @property
    def num_classes(self) -> int:
        return self.rows.shape[-1]


@frozen(eq=False)
class PooledTriple:
    """Class scores of the max-, min- and avg-pooled features of every patch."""

    max_scores: Tensor
    min_scores: Tensor
    avg_scores: Tensor

    @classmethod
    def degenerate(cls, scores: Tensor) -> "PooledTriple":
        """A single-sample patch: max, min and avg coincide."""
        return cls(max_scores=scores, min_scores=scores, avg_scores=scores)

    def select(self, index: np.ndarray) -> "PooledTriple":
        return PooledTriple(
            max_scores=take(self.max_scores, index),
            min_scores=take(self.min_scores, index),
            avg_scores=take(self.avg_scores, index),
        )


@frozen
class Sidedness:
    """
    Gradient weights of the two arguments of a cross-modal KL term.

    `to_2d` scales the gradient reaching the 2D rows (the 2D branch mimics
    3D), `to_3d` the one reaching the 3D rows. A zero weight detaches that
    side; loss values do not depend on the weights.
    """

    to_2d: float = 1.0
    to_3d: float = 1.0


BOTH_SIDES = Sidedness()


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise sum_i p_i * log(p_i / q_i) of two (N, C) maps."""
    _check_simplex("kl p", p)
    _check_simplex("kl q", q)
    if p.shape != q.shape:
        raise ContractViolation(f"kl: shapes {p.shape} and {q.shape} differ")
    return reduce_sum(mul(p, log(p) - log(q)), axis=-1)


def kl_distance(p: Tensor, q: Tensor) -> Tensor:
    """KL distance of two C-vectors."""
    return reduce_sum(kl_rows(p, q))


def _cross_modal(pairs: list[Tensor], p3d: Tensor, sides: Sidedness) -> Tensor:
    if p3d.shape[0] == 0:
        raise ContractViolation("cross-modal loss over zero points")
    target = grad_scale(p3d, sides.to_3d)
    terms = [kl_rows(grad_scale(p2d, sides.to_2d), target) for p2d in pairs]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return mean(total)


def loss_cml(p2d_sampled: Tensor, p3d: Tensor, sides: Sidedness = BOTH_SIDES) -> Tensor:
    """(1/N) sum_n K(Samp(P_2D)^n, P_3D^n)."""
    return _cross_modal([p2d_sampled], p3d, sides)


def loss_dscml(triple: PooledTriple, p3d: Tensor, sides: Sidedness = BOTH_SIDES) -> Tensor:
    """
    (1/N) sum_n [K(max^n, P_3D^n) + K(min^n, P_3D^n)].

    Given a triple pooled over the fixed square patch, this is the
    square-patch (zero-offset) form of the same loss.
    """
    return _cross_modal([triple.max_scores, triple.min_scores], p3d, sides)


def loss_std_avg(triple: PooledTriple, p3d: Tensor, sides: Sidedness = BOTH_SIDES) -> Tensor:
    """(1/N) sum_n K(avg^n, P_3D^n), the averaged ablation of `loss_dscml`."""
    return _cross_modal([triple.avg_scores], p3d, sides)


def _label_log_likelihood(rows: Tensor, labels: np.ndarray) -> Tensor:
    return log(take(rows, (np.arange(labels.shape[0]), labels)))


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size == 0:
        raise ContractViolation("segmentation loss over zero points")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractViolation(f"label ids must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")


def loss_seg(avg_scores: Tensor, p3d: Tensor, labels: np.ndarray) -> Tensor:
    """-(1/N) sum_n [log avg^n[y_n] + log P_3D^n[y_n]] over labelled points."""
    return loss_seg_2d(avg_scores, labels) + loss_seg_3d(p3d, labels)


def loss_seg_2d(avg_scores: Tensor, labels: np.ndarray) -> Tensor:
    """The 2D half of `loss_seg`."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, avg_scores.shape[-1])
    return -mean(_label_log_likelihood(avg_scores, labels))


def loss_seg_3d(p3d: Tensor, labels: np.ndarray) -> Tensor:
    """The 3D half of `loss_seg`; also used alone for points without an image counterpart."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, p3d.shape[-1])
    return -mean(_label_log_likelihood(p3d, labels))


def _check_scores(name: str, scores: Tensor) -> None:
    if np.any(scores.data < 0.0) or np.any(scores.data > 1.0) or not np.all(np.isfinite(scores.data)):
        raise ContractViolation(f"{name}: discriminator scores must lie in (0, 1)")


def loss_adv(
    scores_source: Tensor, scores_target: Tensor, saturating: bool = False
) -> tuple[Tensor, Tensor]:
    """
    Discriminator and generator objectives for one source/target pairing.

    Returns:
        d_loss: -mean log(s_src) - mean log(1 - s_trg), minimized by the discriminator
        g_loss: -mean log(s_trg) (non-saturating), or mean log(1 - s_trg) when
            `saturating`, minimized by the generator through the target rows
    """
    _check_scores("source", scores_source)
    _check_scores("target", scores_target)
    fooled = log(1.0 - scores_target)
    d_loss = -mean(log(scores_source)) - mean(fooled)
    g_loss = mean(fooled) if saturating else -mean(log(scores_target))
    return d_loss, g_loss


@frozen(eq=False)
class IoUResult:
    """Per-class IoU (NaN for classes absent from prediction and truth), their mean, and the confusion matrix."""

    per_class: np.ndarray
    miou: float
    confusion: np.ndarray


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with rows indexed by the true class and columns by the predicted class."""
    index = num_classes * true + pred
    return np.bincount(index, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(pred_labels: np.ndarray, true_labels: np.ndarray, num_classes: int) -> IoUResult:
    """
    Intersection over union per class and its mean.

    Classes that appear neither in the prediction nor in the truth have no
    IoU and are left out of the mean.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.size == 0:
        raise ContractViolation("miou over zero points")
    if pred.shape != true.shape:
        raise ContractViolation(f"miou: {pred.shape} predictions for {true.shape} labels")
    for labels in (pred, true):
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ContractViolation(f"miou: label ids must lie in [0, {num_classes})")
    confusion = confusion_matrix(pred, true, num_classes)
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    return IoUResult(per_class=per_class, miou=float(np.mean(per_class[present])), confusion=confusion)
