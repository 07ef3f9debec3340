import math

import numpy as np
import pytest

from dscml_lab.errors import ContractViolation
from dscml_lab.losses import (
    PooledTriple,
    PredictionMap,
    Sidedness,
    confusion_matrix,
    kl_distance,
    kl_rows,
    loss_adv,
    loss_cml,
    loss_dscml,
    loss_seg,
    loss_std_avg,
    miou,
)
from dscml_lab.tensor import Tape, Tensor, softmax


@pytest.fixture
def rows():
    """Random 2D and 3D probability rows for 5 points and 4 classes."""
    rng = np.random.default_rng(4)
    return rng.dirichlet(np.ones(4), size=5), rng.dirichlet(np.ones(4), size=5)


def test_kl_of_identical_distributions_is_zero():
    """Test K(p, p) = 0."""
    p = Tensor([0.1, 0.2, 0.7])
    assert kl_distance(p, p).item() == 0.0


def test_kl_closed_forms():
    """Test K([1,0],[.5,.5]) = ln 2 and a generic two-class value."""
    assert kl_distance(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item() == pytest.approx(math.log(2), abs=1e-9)
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert kl_distance(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item() == pytest.approx(expected, abs=1e-12)


def test_kl_is_non_negative():
    """Test K(p, q) >= 0 on random simplex pairs."""
    rng = np.random.default_rng(0)
    values = kl_rows(Tensor(rng.dirichlet(np.ones(5), 2000)), Tensor(rng.dirichlet(np.ones(5), 2000))).data
    assert values.min() >= 0.0


def test_kl_rejects_off_simplex_rows():
    """Test that rows not summing to one are a contract violation."""
    with pytest.raises(ContractViolation):
        kl_distance(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))


def test_dscml_with_single_sample_patches_doubles_cml(rows):
    """Test that max = min = avg reduces the dual loss to twice the point loss."""
    p2d, p3d = (Tensor(r) for r in rows)
    triple = PooledTriple.degenerate(p2d)
    assert loss_dscml(triple, p3d).item() == pytest.approx(2 * loss_cml(p2d, p3d).item(), rel=1e-15)
    assert loss_std_avg(triple, p3d).item() == loss_cml(p2d, p3d).item()


def test_cross_modal_value_matches_mean_kl(rows):
    """Test loss_cml against the mean of per-row KL values."""
    p2d, p3d = rows
    expected = np.mean(np.sum(p2d * (np.log(p2d) - np.log(p3d)), axis=1))
    assert loss_cml(Tensor(p2d), Tensor(p3d)).item() == pytest.approx(expected, rel=1e-12)


def _side_gradients(sides: Sidedness, rows) -> tuple[float, np.ndarray, np.ndarray]:
    with Tape() as tape:
        logits_2d = tape.leaf(np.log(rows[0]))
        logits_3d = tape.leaf(np.log(rows[1]))
        loss = loss_cml(softmax(logits_2d), softmax(logits_3d), sides)
    grads = tape.backward(loss)
    return loss.item(), grads[logits_2d], grads[logits_3d]


def test_sidedness_routes_gradients(rows):
    """Test that a zero weight stops gradient on that side without changing the value."""
    both, g2d, g3d = _side_gradients(Sidedness(), rows)
    only_2d, h2d, h3d = _side_gradients(Sidedness(to_2d=1.0, to_3d=0.0), rows)
    only_3d, k2d, k3d = _side_gradients(Sidedness(to_2d=0.0, to_3d=1.0), rows)
    assert both == only_2d == only_3d
    assert np.array_equal(h2d, g2d)
    assert not h3d.any()
    assert not k2d.any()
    assert np.array_equal(k3d, g3d)


def test_cross_modal_over_zero_points():
    """Test that an empty batch of points is a contract violation."""
    empty = Tensor(np.zeros((0, 3)))
    with pytest.raises(ContractViolation):
        loss_cml(empty, empty)


def test_uniform_prediction_segmentation_loss():
    """Test that uniform predictions cost 2 ln C."""
    for c in (2, 3, 6):
        uniform = Tensor(np.full((7, c), 1.0 / c))
        assert loss_seg(uniform, uniform, np.arange(7) % c).item() == pytest.approx(2 * math.log(c), abs=1e-9)


def test_segmentation_rejects_bad_labels():
    """Test that label ids >= C and empty label sets are rejected."""
    scores = Tensor(np.full((2, 3), 1.0 / 3))
    with pytest.raises(ContractViolation):
        loss_seg(scores, scores, np.array([0, 3]))
    with pytest.raises(ContractViolation):
        loss_seg(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), np.array([], dtype=np.int64))


def test_fresh_discriminator_losses():
    """Test d_loss = 2 ln 2 and both generator forms at scores of one half."""
    half = Tensor(np.full(4, 0.5))
    d_loss, g_loss = loss_adv(half, half)
    assert d_loss.item() == pytest.approx(2 * math.log(2), abs=1e-9)
    assert g_loss.item() == pytest.approx(math.log(2), abs=1e-12)
    _, saturating = loss_adv(half, half, saturating=True)
    assert saturating.item() == pytest.approx(-math.log(2), abs=1e-12)


def test_adversarial_scores_must_be_probabilities():
    """Test that scores outside [0, 1] are rejected."""
    with pytest.raises(ContractViolation):
        loss_adv(Tensor([1.2]), Tensor([0.5]))


def test_prediction_map_checks_rows_and_labels():
    """Test the simplex check and the domain/modality validators."""
    PredictionMap(rows=Tensor([[0.3, 0.7]]), domain="target", modality="3D")
    with pytest.raises(ContractViolation):
        PredictionMap(rows=Tensor([[0.3, 0.8]]), domain="target", modality="3D")
    with pytest.raises(ValueError):
        PredictionMap(rows=Tensor([[0.3, 0.7]]), domain="test", modality="3D")


def test_confusion_rows_are_true_classes():
    """Test the orientation of the confusion matrix."""
    confusion = confusion_matrix(np.array([1, 1, 0]), np.array([0, 1, 0]), 2)
    assert confusion.tolist() == [[1, 1], [0, 1]]


def test_miou_hand_built_cases():
    """Test perfect prediction, a half-right class and an absent class."""
    assert miou(np.array([0, 1, 2]), np.array([0, 1, 2]), 3).miou == 1.0

    result = miou(np.array([0] * 10), np.array([0] * 5 + [1] * 5), 3)
    assert result.per_class[0] == 0.5
    assert result.per_class[1] == 0.0
    assert math.isnan(result.per_class[2])
    assert result.miou == 0.25


@pytest.mark.parametrize("seed", range(5))
def test_single_class_predictor_scores_its_prevalence(seed):
    """Test that always predicting class k gives IoU_k = share of k in the truth and 0 for the other classes."""
    rng = np.random.default_rng(seed)
    true = np.concatenate([np.arange(6), rng.integers(0, 6, size=200)])
    k = int(rng.integers(0, 6))
    result = miou(np.full_like(true, k), true, 6)
    assert result.per_class[k] == pytest.approx(np.mean(true == k))
    assert np.array_equal(np.delete(result.per_class, k), np.zeros(5))
    assert result.miou == pytest.approx(np.mean(true == k) / 6)


def test_miou_rejects_out_of_range_labels():
    """Test that label ids >= C are a contract violation."""
    with pytest.raises(ContractViolation):
        miou(np.array([0, 3]), np.array([0, 1]), 3)
