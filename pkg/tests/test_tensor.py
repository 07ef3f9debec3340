import gc
import math
import weakref

import numpy as np
import pytest

from dscml_lab.errors import ContractViolation, ShapeError, TapeError
from dscml_lab.tensor import (
    LOG_FLOOR,
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    detach,
    exp,
    gather_rows,
    grad_check,
    grad_scale,
    inject_fault,
    interpolate,
    load_arrays,
    log,
    matmul,
    mean,
    mul,
    reduce_max,
    reduce_sum,
    save_arrays,
    softmax,
    take,
)


def test_add_values():
    """Test elementwise add of two vectors."""
    assert np.array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_add_broadcast_gradient_sums_over_rows():
    """Test that a broadcast bias receives the sum of the row gradients."""
    with Tape() as tape:
        x = tape.leaf(np.ones((3, 2)))
        bias = tape.leaf(np.zeros(2))
        loss = reduce_sum(mul(x + bias, Tensor([[1.0, 2.0]] * 3)))
    grads = tape.backward(loss)
    assert np.array_equal(grads[bias], [3.0, 6.0])
    assert grads[x].shape == (3, 2)


def test_broadcast_rejects_non_trailing_mismatch():
    """Test that shapes that only broadcast numpy-style are rejected with both shapes."""
    with pytest.raises(ShapeError) as info:
        add(Tensor(np.ones((3, 2))), Tensor(np.ones(3)))
    assert info.value.shapes == ((3, 2), (3,))


def test_broadcast_is_one_way():
    """Test leading and size-1 broadcasting into the larger operand, and that two-way broadcasting is refused."""
    rows = Tensor(np.arange(12.0).reshape(3, 4))
    assert add(Tensor(np.ones((1, 4))), rows).shape == (3, 4)
    assert mul(Tensor(np.ones(4)), rows).shape == (3, 4)
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))))


def test_matmul_identity():
    """Test matmul(I, X) == X."""
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_shape_mismatch():
    """Test that an inner dimension mismatch raises ShapeError."""
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_constant_grid():
    """Test a 3x3 ones kernel over a 5x5 ones grid: 9 inside, 4 in the corners."""
    out = conv2d(Tensor(np.ones((5, 5, 1))), Tensor(np.ones((3, 3, 1, 1)))).data[:, :, 0]
    assert out[2, 2] == 9.0
    assert out[0, 0] == 4.0
    assert out[0, 2] == 6.0


def test_conv2d_rejects_even_kernel():
    """Test that an even kernel raises ShapeError."""
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((5, 5, 1))), Tensor(np.ones((2, 2, 1, 1))))


def test_conv2d_batch_matches_each_image():
    """Test that a stacked batch convolves each image as if alone, values and gradients."""
    rng = np.random.default_rng(3)
    images = rng.normal(size=(3, 5, 6, 2))
    kernel = rng.normal(size=(3, 3, 2, 4))
    weights = rng.normal(size=(3, 5, 6, 4))
    with Tape() as tape:
        x = tape.leaf(images)
        k = tape.leaf(kernel)
        out = conv2d(x, k)
        loss = reduce_sum(mul(out, Tensor(weights)))
    grads = tape.backward(loss)
    d_kernel = np.zeros_like(kernel)
    for b in range(3):
        with Tape() as single:
            xb = single.leaf(images[b])
            kb = single.leaf(kernel)
            ob = conv2d(xb, kb)
            lb = reduce_sum(mul(ob, Tensor(weights[b])))
        assert np.allclose(out.data[b], ob.data, rtol=0, atol=1e-12)
        single_grads = single.backward(lb)
        assert np.allclose(grads[x][b], single_grads[xb], rtol=0, atol=1e-12)
        d_kernel += single_grads[kb]
    assert np.allclose(grads[k], d_kernel, rtol=0, atol=1e-10)


def test_gather_rows_sums_repeated_rows():
    """Test that a row gathered twice receives both gradients and an ungathered row none."""
    with Tape() as tape:
        a = tape.leaf(np.arange(8.0).reshape(4, 2))
        loss = reduce_sum(mul(gather_rows(a, np.array([2, 0, 2])), Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])))
    assert np.array_equal(tape.backward(loss)[a], [[3.0, 4.0], [0.0, 0.0], [6.0, 8.0], [0.0, 0.0]])


def test_take_basic_and_fancy_keys():
    """Test the slice path and the repeated-index path of take's derivative."""
    with Tape() as tape:
        a = tape.leaf(np.ones((2, 3, 2)))
        sliced = reduce_sum(a[:, :, 0])
        fancy = reduce_sum(take(a, (np.array([1, 1]), np.array([0, 0]), 1)))
        loss = add(sliced, fancy)
    grad = tape.backward(loss)[a]
    assert np.array_equal(grad[:, :, 0], np.ones((2, 3)))
    assert grad[1, 0, 1] == 2.0
    assert grad.sum() == 8.0


def test_interpolate_corners_and_edges():
    """Test exact corner values, a midpoint and the last row and column of the grid."""
    grid = Tensor(np.arange(12.0).reshape(3, 4, 1))
    out = interpolate(grid, Tensor([0.0, 3.0, 1.5, 3.0]), Tensor([0.0, 2.0, 0.5, 1.0])).data[:, 0]
    assert np.allclose(out, [0.0, 11.0, 3.5, 7.0], rtol=0, atol=1e-12)
    with pytest.raises(ContractViolation):
        interpolate(grid, Tensor([3.5]), Tensor([0.0]))


def test_softmax_closed_form():
    """Test softmax of [ln 1, ln 2, ln 3]."""
    out = softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    assert np.allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_rows_sum_to_one_for_large_logits():
    """Test that max-subtraction keeps huge logits finite and rows on the simplex."""
    rng = np.random.default_rng(0)
    out = softmax(Tensor(rng.normal(scale=500.0, size=(20, 6)))).data
    assert np.all(np.isfinite(out))
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12


def test_softmax_shift_invariance():
    """Test softmax(x + c) == softmax(x)."""
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(softmax(Tensor(x + 7.5)).data, softmax(Tensor(x)).data, atol=1e-15)


def test_softmax_rejects_non_finite():
    """Test that NaN logits are a contract violation."""
    with pytest.raises(ContractViolation):
        softmax(Tensor([0.0, math.nan]))


def test_log_clamps_at_floor():
    """Test that log(0) evaluates at the floor and passes no gradient."""
    with Tape() as tape:
        x = tape.leaf([0.0, 1.0])
        loss = reduce_sum(log(x))
    assert loss.item() == pytest.approx(math.log(LOG_FLOOR))
    assert np.array_equal(tape.backward(loss)[x], [0.0, 1.0])


def test_square_gradient():
    """Test d(sum(x * x))/dx = 2x, with the reused input accumulating."""
    with Tape() as tape:
        x = tape.leaf([1.0, -2.0, 3.0])
        loss = reduce_sum(x * x)
    assert np.array_equal(tape.backward(loss)[x], [2.0, -4.0, 6.0])


def test_detach_blocks_gradient():
    """Test that x * detach(x) has gradient detach(x), not 2x."""
    with Tape() as tape:
        x = tape.leaf([1.0, -2.0])
        loss = reduce_sum(x * detach(x))
    assert np.array_equal(tape.backward(loss)[x], [1.0, -2.0])


def test_detached_loss_has_zero_gradient():
    """Test that a loss built from detached inputs only yields zero gradients."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
        loss = reduce_sum(exp(detach(x)))
    assert np.array_equal(tape.backward(loss)[x], [0.0, 0.0])


def test_grad_scale_keeps_value_and_scales_gradient():
    """Test that grad_scale is the identity forward and scales backward."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
        y = grad_scale(x, 0.25)
        loss = reduce_sum(y * y)
    assert np.array_equal(y.data, x.data)
    assert np.array_equal(tape.backward(loss)[x], [0.5, 1.0])


def test_grad_scale_zero_detaches():
    """Test that a zero factor returns a detached tensor."""
    with Tape() as tape:
        x = tape.leaf([1.0])
    assert not grad_scale(x, 0.0).attached


def test_max_gradient_routes_to_first_argmax():
    """Test that ties send the whole gradient to the first maximum."""
    with Tape() as tape:
        x = tape.leaf([[1.0, 3.0, 3.0, 0.0]])
        loss = reduce_sum(reduce_max(x, axis=1))
    assert np.array_equal(tape.backward(loss)[x], [[0.0, 1.0, 0.0, 0.0]])


def test_backward_twice_raises():
    """Test that a consumed tape cannot run backward again."""
    with Tape() as tape:
        loss = reduce_sum(tape.leaf([1.0, 2.0]))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_reset_allows_reuse():
    """Test that reset() reopens a consumed tape."""
    tape = Tape()
    with tape:
        tape.backward(reduce_sum(tape.leaf([1.0])))
    tape.reset()
    with tape:
        x = tape.leaf([2.0])
        loss = reduce_sum(x * x)
    assert tape.backward(loss)[x][0] == 4.0


def test_consumed_tape_is_freed_without_collector():
    """Test that tensors do not keep their tape alive and backward drops the records."""
    gc.disable()
    try:
        tape = Tape()
        with tape:
            x = tape.leaf([1.0, 2.0])
            loss = reduce_sum(x * x)
        grads = tape.backward(loss)
        assert tape.records == []
        ref = weakref.ref(tape)
        del tape
        assert ref() is None
        assert np.array_equal(grads[x], [2.0, 4.0])
        with pytest.raises(TapeError):
            backward(loss)
    finally:
        gc.enable()


def test_backward_requires_scalar():
    """Test that a non-scalar loss raises ShapeError."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_mixing_tapes_raises():
    """Test that combining leaves of two tapes is an error."""
    a, b = Tape(), Tape()
    with pytest.raises(TapeError):
        add(a.leaf([1.0]), b.leaf([1.0]))


def test_mean_of_empty_axis_raises():
    """Test that an empty reduction is a contract violation."""
    with pytest.raises(ContractViolation):
        mean(Tensor(np.ones((0, 3))), axis=0)


def test_identical_inputs_give_identical_gradients():
    """Test that evaluation and backward are bit-for-bit repeatable."""

    def run() -> np.ndarray:
        with Tape() as tape:
            x = tape.leaf(np.linspace(-1.0, 1.0, 12).reshape(3, 4))
            loss = reduce_sum(softmax(x) * exp(x))
        return tape.backward(loss)[x]

    assert np.array_equal(run(), run())


def test_grad_check_sum_of_squares():
    """Test that the sum of squares passes at a tight tolerance."""
    report = grad_check(lambda t: reduce_sum(t * t), np.array([0.3, -1.1, 2.0]), tol=1e-6)
    assert report.passed


def test_grad_check_softmax_then_kl():
    """Test the gradient of a softmax followed by a KL-style reduction."""
    q = np.array([0.2, 0.5, 0.3])

    def f(t: Tensor) -> Tensor:
        p = softmax(t)
        return reduce_sum(p * (log(p) - log(Tensor(q))))

    assert grad_check(f, np.array([0.1, -0.4, 0.9])).passed


def test_grad_check_fails_on_wrong_derivative():
    """Test the negative control: a corrupted exp derivative is caught."""
    with inject_fault("exp"):
        report = grad_check(lambda t: reduce_sum(exp(t)), np.array([0.1, 0.2]))
    assert not report.passed


def test_save_and_load_arrays(temp_dir):
    """Test that the array codec keeps dtypes, shapes, values and extra metadata."""
    path = temp_dir / "arrays.json"
    arrays = {
        "weights": np.arange(6.0).reshape(2, 3) / 7.0,
        "labels": np.array([3, -1, 2], dtype=np.int64),
        "mask": np.array([True, False, True]),
        "empty": np.zeros((0, 4)),
    }
    save_arrays(path, arrays, {"iteration": 5})
    loaded, extra = load_arrays(path)

    assert extra == {"iteration": 5}
    assert set(loaded) == set(arrays)
    assert np.array_equal(loaded["weights"], arrays["weights"])
    assert loaded["labels"].dtype == np.int64
    assert loaded["mask"].dtype == np.bool_
    assert loaded["empty"].shape == (0, 4)
    assert path.with_suffix(".bin").stat().st_size == 8 * 6 + 8 * 3 + 3
