"""
Projection-guided patch pooling over dense 2D feature maps.

A patch is the K x K integer lattice around a point's projected pixel
position, each of its K^2 sample locations optionally displaced by a learned
offset. Sample values come from bilinear interpolation with border clamping
and are reduced per channel by max, min or mean.
"""

import math

import numpy as np
from attrs import field, frozen

from dscml_lab.errors import ContractViolation, ShapeError
from dscml_lab.tensor import (
    Tensor,
    clip,
    interpolate,
    mean,
    reduce_max,
    reduce_min,
    reshape,
)

POOL_MODES = ("max", "min", "avg")


def _odd_positive(instance: object, attribute: object, value: int) -> None:
    if value < 1 or value % 2 == 0:
        raise ContractViolation(f"patch size must be a positive odd integer, got {value}")


@frozen
class PatchSpec:
    size: int = field(default=5, validator=_odd_positive)

    @property
    def num_samples(self) -> int:
        return self.size * self.size

    @property
    def base_grid(self) -> np.ndarray:
        """(K^2, 2) integer (dx, dy) displacements in row-major order, centered at (0, 0)."""
        return base_grid(self.size)


def base_grid(size: int) -> np.ndarray:
    half = size // 2
    dy, dx = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)


def _as_tensor(value: Tensor | np.ndarray) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def bilinear_sample(grid: Tensor, x: Tensor | np.ndarray, y: Tensor | np.ndarray) -> Tensor:
    """
    Bilinear interpolation of an (H, W, d) grid at real coordinates.

    Coordinates are clamped into [0, W-1] x [0, H-1] first, so samples beyond
    the border take the border values. Differentiable with respect to the
    grid and to the coordinates.

    Args:
        grid: (H, W, d) values; cell (row, col) sits at coordinate (x=col, y=row)
        x: (M,) column coordinates
        y: (M,) row coordinates

    Returns:
        (M, d) interpolated rows
    """
    height, width, _ = grid.shape
    xs = clip(_as_tensor(x), 0.0, width - 1.0)
    ys = clip(_as_tensor(y), 0.0, height - 1.0)
    if xs.data.ndim != 1 or xs.shape != ys.shape:
        raise ShapeError("bilinear_sample", xs.shape, ys.shape)
    return interpolate(grid, xs, ys)


def sample_patches(feat: Tensor, centers: np.ndarray, offsets: Tensor | np.ndarray | None, size: int) -> Tensor:
    """
    Bilinear samples of every patch location.

    Args:
        feat: (H, W, d) feature map
        centers: (N, 2) projected (u, v) positions
        offsets: (N, K^2, 2) displacements added to the base grid, or None for
            the fixed square patch
        size: Patch side K

    Returns:
        (N, K^2, d) sampled features
    """
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    k2 = size * size
    fixed = centers[:, None, :] + base_grid(size)[None, :, :]
    if offsets is None:
        coords = Tensor(fixed)
    else:
        offsets = _as_tensor(offsets)
        if offsets.shape != (n, k2, 2):
            raise ShapeError("sample_patches", offsets.shape, (n, k2, 2))
        coords = offsets + fixed
    xs = reshape(coords[:, :, 0], (n * k2,))
    ys = reshape(coords[:, :, 1], (n * k2,))
    return reshape(bilinear_sample(feat, xs, ys), (n, k2, feat.shape[2]))


def reduce_patches(samples: Tensor, mode: str) -> Tensor:
    """Per-channel reduction of (N, K^2, d) patch samples to (N, d)."""
    if mode == "max":
        return reduce_max(samples, axis=1)
    if mode == "min":
        return reduce_min(samples, axis=1)
    if mode == "avg":
        return mean(samples, axis=1)
    raise ContractViolation(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")


def deformable_pool(feat: Tensor, centers: np.ndarray, offsets: Tensor | np.ndarray, mode: str) -> Tensor:
    """Pool each point's deformable patch; the patch side is inferred from the offsets."""
    if mode not in POOL_MODES:
        raise ContractViolation(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")
    k2 = _as_tensor(offsets).shape[1]
    size = math.isqrt(k2)
    if size * size != k2:
        raise ShapeError("deformable_pool", _as_tensor(offsets).shape)
    return reduce_patches(sample_patches(feat, centers, offsets, size), mode)


def square_pool(feat: Tensor, centers: np.ndarray, size: int, mode: str) -> Tensor:
    """Pool the fixed K x K square patch around each point."""
    return reduce_patches(sample_patches(feat, centers, None, size), mode)


def brute_force_pool(feat: np.ndarray, centers: np.ndarray, offsets: np.ndarray, mode: str) -> np.ndarray:
    """Reference pooling by explicit enumeration; shares no code with `deformable_pool`."""
    if mode not in POOL_MODES:
        raise ContractViolation(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")
    height, width, depth = feat.shape
    n, k2, _ = offsets.shape
    size = math.isqrt(k2)
    half = size // 2
    out = np.zeros((n, depth))
    for p in range(n):
        samples: list[np.ndarray] = []
        for s in range(k2):
            row, col = divmod(s, size)
            x = centers[p, 0] + (col - half) + offsets[p, s, 0]
            y = centers[p, 1] + (row - half) + offsets[p, s, 1]
            x = min(max(x, 0.0), width - 1.0)
            y = min(max(y, 0.0), height - 1.0)
            left, top = math.floor(x), math.floor(y)
            right, bottom = min(left + 1, width - 1), min(top + 1, height - 1)
            fx, fy = x - left, y - top
            samples.append(
                feat[top, left] * (1 - fx) * (1 - fy)
                + feat[top, right] * fx * (1 - fy)
                + feat[bottom, left] * (1 - fx) * fy
                + feat[bottom, right] * fx * fy
            )
        for c in range(depth):
            column = [sample[c] for sample in samples]
            if mode == "max":
                out[p, c] = max(column)
            elif mode == "min":
                out[p, c] = min(column)
            else:
                out[p, c] = sum(column) / len(column)
    return out
