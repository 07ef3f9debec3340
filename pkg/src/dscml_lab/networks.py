"""
Parametric components: 2D and 3D feature networks, classifiers, the offset
head and the domain discriminators.

Parameters live in flat dictionaries of numpy arrays keyed by stable
hierarchical names ("net2d.conv0.weight", "d1.fc2.bias", ...). Forward
functions take the same names mapped to Tensors, so a caller decides whether
they are tape leaves or constants.
"""

from collections.abc import Mapping

import numpy as np
from attrs import frozen

from dscml_lab.geometry import SCENE_BOUNDS, nearest_pixel
from dscml_lab.tensor import (
    Tensor,
    conv2d,
    gather_rows,
    matmul,
    mean,
    relu,
    reshape,
    sigmoid,
    softmax,
)

Params = dict[str, np.ndarray]
TensorParams = Mapping[str, Tensor]


@frozen
class Net2DSpec:
    channels: tuple[int, ...] = (3, 16, 16, 16)
    kernel: int = 3

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


@frozen
class Net3DSpec:
    widths: tuple[int, ...] = (3, 32, 32, 16)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@frozen
class ClassifierSpec:
    feature_dim: int = 16
    num_classes: int = 6


@frozen
class OffsetHeadSpec:
    feature_dim: int = 16
    patch_size: int = 5
    kernel: int = 3

    @property
    def out_channels(self) -> int:
        return 2 * self.patch_size * self.patch_size


@frozen
class DiscriminatorSpec:
    num_classes: int = 6
    hidden: tuple[int, ...] = (64, 64)


@frozen
class GeneratorSpec:
    """Everything G is made of: both feature networks, both classifiers and the offset head."""

    net2d: Net2DSpec
    net3d: Net3DSpec
    classifier: ClassifierSpec
    offset_head: OffsetHeadSpec

    @classmethod
    def build(
        cls,
        feature_dim: int,
        num_classes: int,
        patch_size: int,
        hidden_2d: tuple[int, ...] = (16, 16),
        hidden_3d: tuple[int, ...] = (32, 32),
    ) -> "GeneratorSpec":
        return cls(
            net2d=Net2DSpec(channels=(3, *hidden_2d, feature_dim)),
            net3d=Net3DSpec(widths=(3, *hidden_3d, feature_dim)),
            classifier=ClassifierSpec(feature_dim=feature_dim, num_classes=num_classes),
            offset_head=OffsetHeadSpec(feature_dim=feature_dim, patch_size=patch_size),
        )


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_generator(spec: GeneratorSpec, rng: np.random.Generator) -> Params:
    """Fan-in scaled uniform weights, zero biases, and an all-zero offset head."""
    params: Params = {}
    k = spec.net2d.kernel
    for i, (cin, cout) in enumerate(zip(spec.net2d.channels, spec.net2d.channels[1:], strict=False)):
        params[f"net2d.conv{i}.weight"] = _uniform(rng, k * k * cin, (k, k, cin, cout))
        params[f"net2d.conv{i}.bias"] = np.zeros(cout)
    for i, (fin, fout) in enumerate(zip(spec.net3d.widths, spec.net3d.widths[1:], strict=False)):
        params[f"net3d.fc{i}.weight"] = _uniform(rng, fin, (fin, fout))
        params[f"net3d.fc{i}.bias"] = np.zeros(fout)
    d, c = spec.classifier.feature_dim, spec.classifier.num_classes
    for name in ("cls2d", "cls3d"):
        params[f"{name}.weight"] = _uniform(rng, d, (d, c))
        params[f"{name}.bias"] = np.zeros(c)
    head = spec.offset_head
    params["offset.weight"] = np.zeros((head.kernel, head.kernel, head.feature_dim, head.out_channels))
    params["offset.bias"] = np.zeros(head.out_channels)
    return params


def init_discriminator(spec: DiscriminatorSpec, rng: np.random.Generator, prefix: str) -> Params:
    """Hidden layers fan-in scaled, final layer zero so every score starts at 0.5."""
    widths = (spec.num_classes, *spec.hidden, 1)
    params: Params = {}
    last = len(widths) - 2
    for i, (fin, fout) in enumerate(zip(widths, widths[1:], strict=False)):
        weight = np.zeros((fin, fout)) if i == last else _uniform(rng, fin, (fin, fout))
        params[f"{prefix}.fc{i}.weight"] = weight
        params[f"{prefix}.fc{i}.bias"] = np.zeros(fout)
    return params


def as_constants(params: Params) -> dict[str, Tensor]:
    return {name: Tensor(value) for name, value in params.items()}


def _mlp(x: Tensor, params: TensorParams, prefix: str) -> Tensor:
    layers = sum(1 for name in params if name.startswith(f"{prefix}.fc") and name.endswith(".weight"))
    for i in range(layers):
        x = matmul(x, params[f"{prefix}.fc{i}.weight"]) + params[f"{prefix}.fc{i}.bias"]
        if i < layers - 1:
            x = relu(x)
    return x


def forward_2d(image: Tensor | np.ndarray, params: TensorParams) -> Tensor:
    """Dense (H, W, d) features of an (H, W, 3) image, or (B, H, W, d) for a stacked batch."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    layers = sum(1 for name in params if name.startswith("net2d.conv") and name.endswith(".weight"))
    for i in range(layers):
        x = conv2d(x, params[f"net2d.conv{i}.weight"]) + params[f"net2d.conv{i}.bias"]
        if i < layers - 1:
            x = relu(x)
    return x


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Map scene coordinates into [-1, 1] per axis of SCENE_BOUNDS."""
    low, high = SCENE_BOUNDS
    return 2.0 * (points - low) / (high - low) - 1.0


def forward_3d(points: np.ndarray, params: TensorParams) -> Tensor:
    """Per-point (N, d) features; row n depends on point n only."""
    return _mlp(Tensor(normalize_points(points)), params, "net3d")


def classify(features: Tensor, params: TensorParams, prefix: str) -> Tensor:
    """Affine map to class logits followed by a row softmax."""
    return softmax(matmul(features, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"], axis=-1)


def predict_offsets(feat_2d: Tensor, centers: np.ndarray, params: TensorParams) -> Tensor:
    """
    Offsets of each point's patch samples, read from the dense offset map.

    The map is computed for every pixel and read at the nearest pixel of each
    projected center, the same guidance rule used for point sampling.

    Returns:
        (N, K^2, 2) displacements (dx, dy)
    """
    height, width, _ = feat_2d.shape
    dense = conv2d(feat_2d, params["offset.weight"]) + params["offset.bias"]
    channels = dense.shape[2]
    cols, rows = nearest_pixel(centers, height, width)
    picked = gather_rows(reshape(dense, (height * width, channels)), rows * width + cols)
    return reshape(picked, (centers.shape[0], channels // 2, 2))


def discriminate(pred: Tensor, params: TensorParams, prefix: str) -> tuple[Tensor, Tensor]:
    """
    Score every prediction row with one discriminator.

    Returns:
        scores: (M,) probabilities that each row came from the source domain
        rho: their mean
    """
    scores = reshape(sigmoid(_mlp(pred, params, prefix)), (pred.shape[0],))
    return scores, mean(scores)
