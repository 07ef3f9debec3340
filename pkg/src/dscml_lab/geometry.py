"""
Pinhole projection and synthetic paired image / point cloud scenes.

World coordinates follow the camera convention: x to the right, y down and
z forward. The ground is the plane y = GROUND_Y below the sensor, which sits
at the world origin unless a camera says otherwise.
"""

import logging
from collections.abc import Callable
from typing import Any

import numpy as np
from attrs import field, frozen, validators

from dscml_lab.errors import ConfigError, ContractViolation
from dscml_lab.seeding import random_stream
from dscml_lab.tensor import Tensor, gather_rows, reshape

logger = logging.getLogger(__name__)

EPS_DEPTH = 1e-3
GROUND_Y = 1.5
SKY_COLOR = (0.55, 0.7, 0.9)
# Class id given to pixels that see no surface. Image labels stay within
# 0..C-1, so sky is folded into ground; no point ever lands on the sky.
SKY_LABEL = 0

# Axis-aligned box enclosing every generated scene, used to normalize
# point coordinates before the 3D network.
SCENE_BOUNDS = np.array([[-20.0, -8.0, 0.0], [20.0, 2.0, 40.0]])

DEFAULT_CLASS_NAMES = ("ground", "vehicle", "pole", "vegetation", "building", "pedestrian")

_CLASS_COLORS = (
    (0.35, 0.35, 0.33),
    (0.80, 0.15, 0.15),
    (0.85, 0.85, 0.20),
    (0.15, 0.60, 0.20),
    (0.55, 0.45, 0.70),
    (0.95, 0.55, 0.25),
)


def class_names(num_classes: int) -> tuple[str, ...]:
    extra = tuple(f"class{k}" for k in range(len(DEFAULT_CLASS_NAMES), num_classes))
    return (DEFAULT_CLASS_NAMES + extra)[:num_classes]


def class_color(label: int) -> np.ndarray:
    if label < len(_CLASS_COLORS):
        return np.array(_CLASS_COLORS[label])
    return random_stream(label, "class-color").uniform(0.1, 0.9, size=3)


def _as_array(shape: tuple[int, ...]) -> Callable[[Any], np.ndarray]:
    def convert(value: Any) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.shape != shape:
            raise ConfigError(f"expected shape {shape}, got {array.shape}")
        return array

    return convert


@frozen(eq=False)
class CameraModel:
    """Pinhole intrinsics, image size and a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(factory=lambda: np.eye(3), converter=_as_array((3, 3)))
    translation: np.ndarray = field(factory=lambda: np.zeros(3), converter=_as_array((3,)))

    def __attrs_post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9, rtol=0.0):
            raise ConfigError("rotation is not orthonormal")

    @classmethod
    def for_image(cls, height: int, width: int) -> "CameraModel":
        """Forward-looking camera at the world origin with a ~64 degree field of view."""
        focal = 0.8 * width
        return cls(fx=focal, fy=focal, cx=width / 2, cy=height / 2, width=width, height=height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world-frame directions of the rays through pixel coordinates (u, v)."""
        cam = np.stack(
            [(np.ravel(u) - self.cx) / self.fx, (np.ravel(v) - self.cy) / self.fy, np.ones(np.size(u))],
            axis=1,
        )
        world = cam @ self.rotation
        return world / np.linalg.norm(world, axis=1, keepdims=True)


def project_points(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """
    Project world points into the image.

    Args:
        points: (N, 3) world coordinates
        cam: The camera

    Returns:
        proj: (N, 2) pixel coordinates (u, v); NaN for points at or behind the camera
        valid: (N,) True where depth > EPS_DEPTH and (u, v) lies in [0, W) x [0, H)
    """
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ContractViolation("project_points: non-finite coordinates")
    p_cam = points @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    in_front = z > EPS_DEPTH
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, cam.cx + cam.fx * p_cam[:, 0] / safe_z, np.nan)
    v = np.where(in_front, cam.cy + cam.fy * p_cam[:, 1] / safe_z, np.nan)
    with np.errstate(invalid="ignore"):
        valid = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), valid


def nearest_pixel(proj: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Round-half-up pixel (col, row) of each projection, clamped into the image."""
    cols = np.clip(np.floor(proj[:, 0] + 0.5), 0, width - 1).astype(np.int64)
    rows = np.clip(np.floor(proj[:, 1] + 0.5), 0, height - 1).astype(np.int64)
    return cols, rows


def sample_at_points(feature_map: Tensor, proj: np.ndarray, valid: np.ndarray) -> Tensor:
    """Nearest-pixel lookup of an (H, W, d) map at each projected point."""
    if not np.all(valid):
        raise ContractViolation("sample_at_points: invalid point requested")
    height, width, depth = feature_map.shape
    cols, rows = nearest_pixel(proj, height, width)
    flat = reshape(feature_map, (height * width, depth))
    return gather_rows(flat, rows * width + cols)


def _non_negative(instance: object, attribute: Any, value: float) -> None:
    if value < 0:
        raise ConfigError(f"{attribute.name} must be >= 0, got {value}")


def _positive(instance: object, attribute: Any, value: float) -> None:
    if value <= 0:
        raise ConfigError(f"{attribute.name} must be > 0, got {value}")


def _float_triple(value: Any) -> tuple[float, float, float]:
    a, b, c = (float(x) for x in value)
    return (a, b, c)


@frozen
class DomainShiftConfig:
    """Appearance and sampling knobs separating one domain from another."""

    brightness_scale: float = field(default=1.0, converter=float, validator=_positive)
    contrast_scale: float = field(default=1.0, converter=float, validator=_positive)
    color_shift: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0), converter=_float_triple)
    pixel_noise_sd: float = field(default=0.0, converter=float, validator=_non_negative)
    point_density_factor: float = field(default=1.0, converter=float, validator=_positive)
    point_noise_sd: float = field(default=0.0, converter=float, validator=_non_negative)
    seed: int = field(default=0, validator=validators.instance_of(int))


SHIFT_PRESETS: dict[str, DomainShiftConfig] = {
    "none": DomainShiftConfig(),
    # images darken and lose contrast; the point cloud is unaffected
    "day-night": DomainShiftConfig(
        brightness_scale=0.35,
        contrast_scale=0.7,
        color_shift=(-0.02, 0.0, 0.08),
        pixel_noise_sd=0.05,
        seed=1,
    ),
    # sparser, noisier point clouds; images unchanged
    "dataset": DomainShiftConfig(point_density_factor=0.5, point_noise_sd=0.02, seed=2),
    "country": DomainShiftConfig(
        brightness_scale=0.8,
        color_shift=(0.06, 0.02, -0.04),
        pixel_noise_sd=0.02,
        point_density_factor=0.8,
        point_noise_sd=0.01,
        seed=3,
    ),
}


def shift_preset(name: str) -> DomainShiftConfig:
    try:
        return SHIFT_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown shift preset {name!r}; choose from {sorted(SHIFT_PRESETS)}") from None


@frozen
class SceneDims:
    height: int = 48
    width: int = 64
    num_points: int = 2048
    num_classes: int = 6


@frozen(eq=False)
class SceneSample:
    """
    One paired observation.

    `point_labels` and `image_labels` are None when the labels of the sample
    are sealed away from training (unlabeled target data).
    """

    image: np.ndarray
    image_labels: np.ndarray | None
    points: np.ndarray
    point_labels: np.ndarray | None
    proj: np.ndarray
    valid: np.ndarray
    domain: str = field(validator=validators.in_(("source", "target")))

    def __attrs_post_init__(self) -> None:
        n = self.points.shape[0]
        if n < 1:
            raise ContractViolation("a scene needs at least one point")
        if self.proj.shape != (n, 2) or self.valid.shape != (n,):
            raise ContractViolation("proj/valid do not align with points")
        if self.point_labels is not None and self.point_labels.shape != (n,):
            raise ContractViolation("point_labels do not align with points")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@frozen
class Primitive:
    """A labelled solid: box (full extents), vertical cylinder (radius, height) or sphere (radius)."""

    kind: str
    label: int
    center: tuple[float, float, float]
    size: tuple[float, ...]


_HIT_EPS = 1e-6


def _ray_depth(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to its first hit on `prim`; inf on a miss."""
    c = np.asarray(prim.center)
    t = np.full(dirs.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "box":
            half = np.asarray(prim.size) / 2
            safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
            t1 = (c - half - origin) / safe
            t2 = (c + half - origin) / safe
            near = np.minimum(t1, t2).max(axis=1)
            far = np.maximum(t1, t2).min(axis=1)
            hit = (far >= near) & (far > _HIT_EPS)
            t = np.where(hit, np.where(near > _HIT_EPS, near, far), np.inf)
        elif prim.kind == "cylinder":
            radius, height = prim.size
            qx, qz = origin[0] - c[0], origin[2] - c[2]
            a = dirs[:, 0] ** 2 + dirs[:, 2] ** 2
            b = 2 * (qx * dirs[:, 0] + qz * dirs[:, 2])
            cc = qx**2 + qz**2 - radius**2
            disc = b**2 - 4 * a * cc
            root = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * np.where(a > 1e-12, a, 1.0))
            y = origin[1] + root * dirs[:, 1]
            hit = (disc >= 0) & (a > 1e-12) & (root > _HIT_EPS) & (np.abs(y - c[1]) <= height / 2)
            t = np.where(hit, root, np.inf)
        elif prim.kind == "sphere":
            (radius,) = prim.size
            q = origin - c
            b = dirs @ q
            disc = b**2 - (q @ q - radius**2)
            root = -b - np.sqrt(np.maximum(disc, 0.0))
            t = np.where((disc >= 0) & (root > _HIT_EPS), root, np.inf)
        elif prim.kind == "plane":
            half_width, depth = prim.size
            root = (GROUND_Y - origin[1]) / np.where(dirs[:, 1] > 1e-12, dirs[:, 1], np.nan)
            x = origin[0] + root * dirs[:, 0]
            z = origin[2] + root * dirs[:, 2]
            hit = (root > _HIT_EPS) & (np.abs(x) <= half_width) & (z >= 0) & (z <= depth)
            t = np.where(hit, root, np.inf)
        else:
            raise ContractViolation(f"unknown primitive kind {prim.kind!r}")
    return t


def first_hit(
    prims: list[Primitive], origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Depth-buffer the primitives along each ray.

    Returns:
        depth: (M,) distance to the nearest surface, inf where nothing is hit
        owner: (M,) index into `prims` of that surface, -1 where nothing is hit
    """
    depths = np.stack([_ray_depth(p, origin, dirs) for p in prims])
    owner = np.argmin(depths, axis=0)
    depth = depths[owner, np.arange(dirs.shape[0])]
    return depth, np.where(np.isfinite(depth), owner, -1)


_KIND_BY_NAME = {
    "vehicle": "box",
    "pole": "cylinder",
    "vegetation": "sphere",
    "building": "box",
    "pedestrian": "cylinder",
}


def _make_object(rng: np.random.Generator, label: int, name: str, cam: CameraModel) -> Primitive:
    far = name == "building"
    z = rng.uniform(16.0, 30.0) if far else rng.uniform(6.0, 26.0)
    reach = 0.9 * z * (cam.width / 2) / cam.fx
    x = rng.uniform(-reach, reach)
    kind = _KIND_BY_NAME.get(name, ("box", "cylinder", "sphere")[label % 3])
    if name == "vehicle":
        size = (rng.uniform(1.6, 2.2), rng.uniform(1.3, 1.8), rng.uniform(3.5, 4.8))
    elif name == "building":
        size = (rng.uniform(4.0, 8.0), rng.uniform(4.0, 9.0), rng.uniform(4.0, 8.0))
    elif name == "pole":
        size = (rng.uniform(0.12, 0.25), rng.uniform(3.0, 5.5))
    elif name == "pedestrian":
        size = (rng.uniform(0.25, 0.35), rng.uniform(1.5, 1.9))
    elif kind == "sphere":
        size = (rng.uniform(0.7, 1.5),)
    elif kind == "cylinder":
        size = (rng.uniform(0.3, 0.8), rng.uniform(1.0, 3.0))
    else:
        size = (rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0))

    # everything rests on the ground
    y = GROUND_Y - size[0] if kind == "sphere" else GROUND_Y - size[1] / 2
    return Primitive(kind=kind, label=label, center=(x, y, z), size=tuple(float(s) for s in size))


def place_primitives(rng: np.random.Generator, num_classes: int, cam: CameraModel) -> list[Primitive]:
    """Ground plane plus at least one object for every non-background class."""
    names = class_names(num_classes)
    prims = [Primitive(kind="plane", label=0, center=(0.0, GROUND_Y, 0.0), size=(40.0, 80.0))]
    labels = list(range(1, num_classes))
    labels += [int(k) for k in rng.integers(1, num_classes, size=rng.integers(0, num_classes))]
    prims.extend(_make_object(rng, label, names[label], cam) for label in labels)
    return prims


def apply_image_shift(
    image: np.ndarray, shift: DomainShiftConfig, rng: np.random.Generator
) -> np.ndarray:
    """Brightness, contrast around the per-channel mean, color shift, then pixel noise."""
    out = image * shift.brightness_scale
    center = out.mean(axis=(0, 1), keepdims=True)
    out = (out - center) * shift.contrast_scale + center
    out = out + np.asarray(shift.color_shift)
    if shift.pixel_noise_sd > 0:
        out = out + rng.normal(0.0, shift.pixel_noise_sd, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _check_dims(dims: SceneDims) -> None:
    if dims.num_classes < 2:
        raise ConfigError(f"need at least 2 classes (background + objects), got {dims.num_classes}")
    if min(dims.height, dims.width) < 8:
        raise ConfigError(f"image {dims.height}x{dims.width} is too small to place primitives (min 8x8)")
    if dims.num_points < 1:
        raise ConfigError("num_points must be >= 1")


def _sample_surface_points(
    rng: np.random.Generator, prims: list[Primitive], cam: CameraModel, count: int
) -> tuple[np.ndarray, np.ndarray]:
    # rays through uniformly random image positions; their first hits are the
    # surfaces a sensor at the camera center sees
    origin = cam.center
    points: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    found = 0
    for _ in range(100):
        u = rng.uniform(0.0, cam.width, size=2 * count)
        v = rng.uniform(0.0, cam.height, size=2 * count)
        dirs = cam.pixel_rays(u, v)
        depth, owner = first_hit(prims, origin, dirs)
        hit = owner >= 0
        points.append(origin + depth[hit, None] * dirs[hit])
        labels.append(np.array([prims[i].label for i in owner[hit]], dtype=np.int64))
        found += int(hit.sum())
        if found >= count:
            break
    else:
        raise ConfigError("scene layout leaves too few surfaces in view to sample points")
    return np.concatenate(points)[:count], np.concatenate(labels)[:count]


def pixel_labels(owner: np.ndarray, prims: list[Primitive]) -> np.ndarray:
    """Class id of each pixel's nearest surface, SKY_LABEL where `owner` is -1."""
    owner_labels = np.array([p.label for p in prims], dtype=np.int64)
    return np.where(owner >= 0, owner_labels[np.maximum(owner, 0)], SKY_LABEL)


def generate_scene(
    layout_seed: int,
    shift: DomainShiftConfig,
    dims: SceneDims,
    domain: str = "source",
    camera: CameraModel | None = None,
) -> SceneSample:
    """
    Generate one paired image / point cloud scene.

    The layout, the point sample and the image texture depend on `layout_seed`
    only; the shift's appearance knobs touch the image, its density and noise
    knobs touch the point cloud. Identical arguments give bit-identical output.
    """
    _check_dims(dims)
    cam = camera or CameraModel.for_image(dims.height, dims.width)
    prims = place_primitives(random_stream(layout_seed, "layout"), dims.num_classes, cam)

    # render at pixel centers with a depth buffer over all primitives
    vv, uu = np.meshgrid(np.arange(dims.height), np.arange(dims.width), indexing="ij")
    depth, owner = first_hit(prims, cam.center, cam.pixel_rays(uu, vv))
    texture_rng = random_stream(layout_seed, "texture")
    tints = texture_rng.uniform(-0.06, 0.06, size=(len(prims), 3))
    palette = np.stack([class_color(p.label) for p in prims]) + tints
    shading = 1.0 / (1.0 + 0.02 * np.where(np.isfinite(depth), depth, 0.0))
    base = np.where(
        (owner >= 0)[:, None],
        palette[np.maximum(owner, 0)] * (0.5 + 0.5 * shading[:, None]),
        np.asarray(SKY_COLOR),
    )
    base = base + texture_rng.normal(0.0, 0.02, size=base.shape)
    base = np.clip(base, 0.0, 1.0).reshape(dims.height, dims.width, 3)
    image_labels = pixel_labels(owner, prims)
    image_labels = image_labels.reshape(dims.height, dims.width)
    image = apply_image_shift(base, shift, random_stream(shift.seed, f"pixel-noise/{layout_seed}"))

    count = max(1, round(dims.num_points * shift.point_density_factor))
    points, point_labels = _sample_surface_points(
        random_stream(layout_seed, "points"), prims, cam, count
    )
    if shift.point_noise_sd > 0:
        jitter = random_stream(layout_seed, "point-noise").normal(0.0, shift.point_noise_sd, points.shape)
        points = points + jitter
    proj, valid = project_points(points, cam)
    logger.debug("scene %d: %d primitives, %d points (%d valid)", layout_seed, len(prims), count, valid.sum())
    return SceneSample(
        image=image,
        image_labels=image_labels,
        points=points,
        point_labels=point_labels,
        proj=proj,
        valid=valid,
        domain=domain,
    )
