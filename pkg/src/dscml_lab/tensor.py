"""
Dense float64 tensors with a reverse-mode differentiation tape.

Every op in this module computes its value eagerly with numpy and, when a tape
is recording, appends a record holding the op's local derivative closure.
`Tape.backward` replays the records in reverse order.
"""

import json
import logging
import weakref
from collections.abc import Callable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from contextvars import ContextVar, Token
from pathlib import Path
from typing import Any

import numpy as np
from attrs import define, field, frozen

from dscml_lab.errors import ContractViolation, ShapeError, TapeError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-8

ArrayLike = Any
Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)
_FAULTY_OPS: set[str] = set()


@define(eq=False)
class Node:
    """A tensor's place on a tape and its accumulated gradient. The tape is held weakly."""

    _tape: "weakref.ReferenceType[Tape]" = field(converter=weakref.ref)
    grad: np.ndarray | None = None

    @property
    def tape(self) -> "Tape | None":
        return self._tape()


class Tensor:
    """A float64 array, optionally attached to a differentiation tape."""

    __slots__ = ("data", "node")

    def __init__(self, data: ArrayLike, node: Node | None = None):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def attached(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        state = "attached" if self.node is not None else "constant"
        return f"Tensor(shape={self.shape}, {state})"

    def __add__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "Tensor | ArrayLike") -> "Tensor":
        if isinstance(other, int | float):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return take(self, key)


@frozen(eq=False)
class Record:
    """One recorded operation: inputs, output and the local derivative closure."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Vjp | None


@define(eq=False)
class Tape:
    """
    Ordered record of operations, consumed by a single backward pass.

    Used as a context manager, the tape records every op evaluated inside the
    block, including ops whose inputs are all constants or detached. Outside
    any block, ops still record onto the tape of an attached input.
    """

    records: list[Record] = field(factory=list)
    consumed: bool = False
    _tokens: list[Token["Tape | None"]] = field(factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._check_open()
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def _check_open(self) -> None:
        if self.consumed:
            raise TapeError("tape was consumed by backward; call reset() before reuse")

    def leaf(self, data: ArrayLike) -> Tensor:
        """Create a differentiable input on this tape."""
        self._check_open()
        return Tensor(np.array(data, dtype=np.float64), Node(self))

    def watch(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Create one leaf per named array."""
        return {name: self.leaf(value) for name, value in arrays.items()}

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> "Gradients":
        """
        Propagate d(loss)/d(node) to every node reachable from `loss`.

        Raises:
            TapeError: If the loss is not on this tape or the tape was consumed
            ShapeError: If the loss is not scalar-shaped
        """
        self._check_open()
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("loss is not attached to this tape")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape)

        loss.node.grad = np.ones_like(loss.data)
        for record in reversed(self.records):
            upstream = record.output.node.grad if record.output.node else None
            if upstream is None or record.vjp is None:
                continue
            local = record.vjp(upstream)
            if record.op in _FAULTY_OPS:
                local = [None if g is None else g * 1.5 for g in local]
            for tensor, grad in zip(record.inputs, local, strict=True):
                if tensor.node is None or grad is None:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(f"{record.op} backward", grad.shape, tensor.shape)
                node = tensor.node
                node.grad = grad if node.grad is None else node.grad + grad
        self.records.clear()
        self.consumed = True
        return Gradients()


class Gradients:
    """Read access to gradients after a backward pass."""

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.node is None or tensor.node.grad is None:
            return np.zeros_like(tensor.data)
        return tensor.node.grad

    def collect(self, tensors: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self[t] for name, t in tensors.items()}


def backward(loss: Tensor) -> Gradients:
    """Run backward on the tape the loss is attached to."""
    tape = loss.node.tape if loss.node is not None else None
    if tape is None:
        raise TapeError("loss is not attached to a live tape")
    return tape.backward(loss)


@contextmanager
def inject_fault(op: str) -> Iterator[None]:
    """Deliberately corrupt the derivative of one op (negative controls)."""
    _FAULTY_OPS.add(op)
    try:
        yield
    finally:
        _FAULTY_OPS.discard(op)


def _as_tensor(value: "Tensor | ArrayLike") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    attached = [t for t in inputs if t.node is not None]
    if tape is None:
        if not attached:
            return Tensor(value)
        tape = attached[0].node.tape  # type: ignore[union-attr]
        if tape is None:
            raise TapeError(f"{op}: the tape of its inputs no longer exists")
    for t in attached:
        if t.node.tape is not tape:  # type: ignore[union-attr]
            raise TapeError(f"{op}: inputs come from different tapes")
    tape._check_open()
    out = Tensor(value, Node(tape))
    tape.records.append(Record(op, inputs, out, vjp if attached else None))
    return out


def detach(t: Tensor) -> Tensor:
    """Same values, no tape node."""
    return Tensor(t.data)


# Elementwise ops broadcast one operand into the other, aligning trailing
# dimensions; each aligned dimension of the smaller operand is equal or 1.


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """
    The result shape of a one-way broadcast.

    The smaller operand may lack leading dimensions or have extent 1 where the
    larger one does not, so (4,) and (1, 4) both broadcast into (3, 4). The
    result is always the larger operand's shape: (3, 1) with (1, 4) is rejected.
    """
    if a == b:
        return a
    big, small = (a, b) if (len(a), int(np.prod(a))) >= (len(b), int(np.prod(b))) else (b, a)
    if len(small) > len(big):
        raise ShapeError(op, a, b)
    for s, g in zip(reversed(small), reversed(big), strict=False):
        if s not in (g, 1):
            raise ShapeError(op, a, b)
    return big


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: "Tensor | ArrayLike", b: "Tensor | ArrayLike") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: "Tensor | ArrayLike", b: "Tensor | ArrayLike") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: "Tensor | ArrayLike", b: "Tensor | ArrayLike") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _emit(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def grad_scale(a: Tensor, factor: float) -> Tensor:
    """Identity on values; multiplies the gradient flowing back through it."""
    if factor == 0.0:
        return detach(a)
    return _emit("grad_scale", a.data, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """
    Stride-1, zero-padded 2D convolution.

    Args:
        x: Input of shape (H, W, Cin), or a batch (B, H, W, Cin) sharing one im2col
        kernel: Weights of shape (k, k, Cin, Cout) with odd k

    Returns:
        Output of shape (H, W, Cout), or (B, H, W, Cout) for a batch
    """
    if x.data.ndim not in (3, 4) or kernel.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0 or cin != x.shape[-1]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    batched = x.data.ndim == 4
    xv = x.data if batched else x.data[None]
    b, h, w, _ = xv.shape
    pad = k // 2
    padded = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * cin)
    weights = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ weights).reshape(b, h, w, cout)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g2 = g.reshape(b * h * w, cout)
        d_kernel = (cols.T @ g2).reshape(kernel.shape)
        d_cols = (g2 @ weights.T).reshape(b, h, w, k, k, cin)
        d_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                d_padded[:, i : i + h, j : j + w] += d_cols[:, :, :, i, j, :]
        d_x = d_padded[:, pad : pad + h, pad : pad + w]
        return (d_x if batched else d_x[0]), d_kernel

    return _emit("conv2d", out if batched else out[0], (x, kernel), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped below at LOG_FLOOR."""
    clamped = np.maximum(a.data, LOG_FLOOR)
    inside = a.data > LOG_FLOOR
    return _emit("log", np.log(clamped), (a,), lambda g: (g * inside / clamped,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _check_finite(op: str, a: Tensor) -> None:
    if not np.all(np.isfinite(a.data)):
        raise ContractViolation(f"{op}: non-finite input")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max-subtraction."""
    _check_finite("softmax", logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (logits,), vjp)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("reduce_sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractViolation("mean: empty reduction")
    return scale(reduce_sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", original, tuple(shape)) from e
    return _emit("reshape", out, (a,), lambda g: (g.reshape(original),))


def _scatter_rows(index: np.ndarray, rows: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `rows[i]` into row `index[i]` of a zero array of `shape`."""
    width = int(np.prod(shape[1:]))
    flat = (index[:, None] * width + np.arange(width)).ravel()
    summed = np.bincount(flat, weights=rows.reshape(-1), minlength=shape[0] * width)
    return summed.reshape(shape)


def _is_basic(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(p is None or p is Ellipsis or isinstance(p, int | np.integer | slice) for p in parts)


def take(a: Tensor, key: Any) -> Tensor:
    """Numpy indexing (`a[key]`) with a scatter-add derivative."""
    out = np.array(a.data[key])
    basic = _is_basic(key)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        if basic:
            # basic indexing selects each element at most once
            grad[key] = g
        else:
            np.add.at(grad, key, g)
        return (grad,)

    return _emit("take", out, (a,), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows `a[index]` along the first axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("gather_rows", a.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ContractViolation(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.data[index]
    shape = a.shape
    return _emit("gather_rows", out, (a,), lambda g: (_scatter_rows(index, g, shape),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractViolation("concatenate: no tensors")
    shapes = [t.shape for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concatenate", *shapes) from e
    bounds = np.cumsum([s[axis] for s in shapes])[:-1]

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, bounds, axis=axis))

    return _emit("concatenate", out, tuple(tensors), vjp)


def _reduce_extreme(op: str, a: Tensor, axis: int, pick: Callable[..., np.ndarray]) -> Tensor:
    # np.argmax/argmin return the first index on ties
    index = np.expand_dims(pick(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, index, axis=axis).squeeze(axis)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, index, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _emit(op, out, (a,), vjp)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    return _reduce_extreme("reduce_max", a, axis, np.argmax)


def reduce_min(a: Tensor, axis: int) -> Tensor:
    return _reduce_extreme("reduce_min", a, axis, np.argmin)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _emit("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def interpolate(grid: Tensor, x: Tensor, y: Tensor) -> Tensor:
    """
    Bilinear interpolation of an (H, W, d) grid at coordinates inside it.

    Cell (row, col) sits at (x=col, y=row). The four corner reads and their
    weights are one op, so the derivative is a single scatter into the grid
    plus the weight slopes along x and y.

    Raises:
        ContractViolation: If a coordinate lies outside [0, W-1] x [0, H-1]
    """
    if grid.data.ndim != 3 or x.data.ndim != 1 or x.shape != y.shape:
        raise ShapeError("interpolate", grid.shape, x.shape, y.shape)
    height, width, depth = grid.shape
    xv, yv = x.data, y.data
    if xv.size and (xv.min() < 0 or xv.max() > width - 1 or yv.min() < 0 or yv.max() > height - 1):
        raise ContractViolation("interpolate: coordinates outside the grid")
    x0, y0 = np.floor(xv), np.floor(yv)
    x1, y1 = np.minimum(x0 + 1, width - 1), np.minimum(y0 + 1, height - 1)
    ax, ay = (xv - x0)[:, None], (yv - y0)[:, None]
    bx, by = 1.0 - ax, 1.0 - ay
    corners = [(r * width + c).astype(np.int64) for r, c in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    flat = grid.data.reshape(height * width, depth)
    v00, v01, v10, v11 = (flat[i] for i in corners)
    weights = (bx * by, ax * by, bx * ay, ax * ay)
    out = v00 * weights[0] + v01 * weights[1] + v10 * weights[2] + v11 * weights[3]

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]:
        d_grid = None
        if grid.node is not None:
            rows = np.concatenate([g * w for w in weights])
            d_grid = _scatter_rows(np.concatenate(corners), rows, (height * width, depth)).reshape(grid.shape)
        d_x = np.sum(g * ((v01 - v00) * by + (v11 - v10) * ay), axis=1)
        d_y = np.sum(g * ((v10 - v00) * bx + (v11 - v01) * ax), axis=1)
        return d_grid, d_x, d_y

    return _emit("interpolate", out, (grid, x, y), vjp)


@frozen
class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference gradients."""

    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray
    tol: float

    @property
    def max_error(self) -> float:
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """
    Compare the tape gradient of a scalar function with central differences.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, 1e-6).
    With `max_coords`, a random subset of coordinates is checked.
    """
    x = np.array(x, dtype=np.float64)
    with Tape() as tape:
        leaf = tape.leaf(x)
        loss = f(leaf)
    analytic_full = tape.backward(loss)[leaf].reshape(-1)

    coords = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))

    numeric = np.empty(coords.size)
    for i, c in enumerate(coords):
        plus, minus = x.copy().reshape(-1), x.copy().reshape(-1)
        plus[c] += step
        minus[c] -= step
        f_plus = f(Tensor(plus.reshape(x.shape))).item()
        f_minus = f(Tensor(minus.reshape(x.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    analytic = analytic_full[coords]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    errors = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic=analytic, numeric=numeric, errors=errors, tol=tol)


# Checkpoint codec: a JSON manifest of (name, dtype, shape, byte offset)
# entries next to one flat little-endian payload file.

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8"), "|u1": np.dtype("|u1")}


def _payload_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def save_arrays(
    manifest_path: Path,
    arrays: Mapping[str, np.ndarray],
    extra: Mapping[str, Any] | None = None,
) -> None:
    """
    Write named arrays as a manifest plus a flat payload file.

    Float arrays are stored as little-endian float64, integer arrays as
    little-endian int64 and boolean arrays as single bytes.
    """
    entries: list[dict[str, Any]] = []
    offset = 0
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with Path.open(_payload_path(manifest_path), "wb") as payload:
        for name in sorted(arrays):
            value = np.asarray(arrays[name])
            if value.dtype == np.bool_:
                code = "|u1"
            elif np.issubdtype(value.dtype, np.integer):
                code = "<i8"
            else:
                code = "<f8"
            raw = np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes()
            entries.append(
                {"name": name, "dtype": code, "shape": list(value.shape), "offset": offset}
            )
            payload.write(raw)
            offset += len(raw)
    manifest = {"arrays": entries, "extra": dict(extra or {})}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("wrote %d arrays (%d bytes) to %s", len(entries), offset, manifest_path)


def load_arrays(manifest_path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read arrays written by `save_arrays`; returns (arrays, extra)."""
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    raw = _payload_path(manifest_path).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        value = np.frombuffer(raw, dtype=dtype, count=count, offset=entry["offset"])
        value = value.reshape(shape).copy()
        arrays[entry["name"]] = value.astype(np.bool_) if entry["dtype"] == "|u1" else value
    return arrays, manifest["extra"]
