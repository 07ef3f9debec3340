"""
The fast verification battery: finite-difference gradient checks of every
op and loss, the pooling enumeration oracle, the square/deformable patch
coincidence, and closed-form loss and metric values.
"""

import logging
import math
import time
from collections.abc import Callable, Iterator

import numpy as np
from attrs import frozen

from dscml_lab.config import DataConfig, ExperimentConfig, ModelConfig, OptimConfig
from dscml_lab.dataset import Split
from dscml_lab.geometry import generate_scene, shift_preset
from dscml_lab.losses import (
    PooledTriple,
    kl_distance,
    kl_rows,
    loss_adv,
    loss_cml,
    loss_dscml,
    loss_seg,
    loss_std_avg,
    miou,
)
from dscml_lab.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    as_constants,
    classify,
    discriminate,
    forward_2d,
    forward_3d,
    init_discriminator,
    init_generator,
    predict_offsets,
)
from dscml_lab.pooling import (
    POOL_MODES,
    base_grid,
    bilinear_sample,
    brute_force_pool,
    deformable_pool,
    sample_patches,
    square_pool,
)
from dscml_lab.seeding import random_stream
from dscml_lab.training import generator_objective, init_state
from dscml_lab.tensor import (
    Tensor,
    add,
    clip,
    concatenate,
    conv2d,
    exp,
    gather_rows,
    grad_check,
    log,
    matmul,
    mean,
    mul,
    reduce_max,
    reduce_min,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    take,
)

logger = logging.getLogger(__name__)

GRAD_STEP = 1e-5
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-12
# pooled samples closer than this may swap order under a GRAD_STEP perturbation
TIE_MARGIN = 1e-3
# coordinates checked per instance when the input is larger
SWEEP_COORDS = 24

Case = tuple[Callable[[Tensor], Tensor], np.ndarray]
CaseBuilder = Callable[[np.random.Generator], Case]


@frozen
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(mul(out, Tensor(weights)))


def _away_from(rng: np.random.Generator, shape: tuple[int, ...], margin: float = 0.1) -> np.ndarray:
    """Values in [-1, -margin] u [margin, 1]."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Values at least 0.05 apart, so max/min selections are stable under the step."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.05 + rng.uniform(0.0, 0.01, size)).reshape(shape) - 0.025 * size


def _fraction(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Fractional parts well inside (0, 1), away from bilinear cell boundaries."""
    return rng.uniform(0.15, 0.85, size=shape)


def _away_from_bounds(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Values in (-1, 1) at least 0.05 away from the clip bounds +-0.5."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    near = np.abs(np.abs(x) - 0.5) < 0.05
    return np.where(near, x + 0.1 * np.sign(x), x)


def _unary(op: Callable[[Tensor], Tensor], shape: tuple[int, ...], draw: Callable | None = None) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Case:
        x = draw(rng, shape) if draw else rng.normal(size=shape)
        w = rng.normal(size=op(Tensor(x)).shape)
        return (lambda t: _weighted(op(t), w)), x

    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor], shape: tuple[int, ...], other: tuple[int, ...], left: bool = True) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Case:
        x = rng.normal(size=shape)
        b = Tensor(rng.normal(size=other))
        apply = (lambda t: op(t, b)) if left else (lambda t: op(b, t))
        w = rng.normal(size=apply(Tensor(x)).shape)
        return (lambda t: _weighted(apply(t), w)), x

    return build


def _bilinear_case(wrt: str) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Case:
        grid = rng.normal(size=(5, 6, 2))
        xs = rng.integers(0, 5, size=4) + _fraction(rng, (4,))
        ys = rng.integers(0, 4, size=4) + _fraction(rng, (4,))
        w = rng.normal(size=(4, 2))
        if wrt == "grid":
            return (lambda t: _weighted(bilinear_sample(t, xs, ys), w)), grid
        coords = np.stack([xs, ys])
        return (lambda t: _weighted(bilinear_sample(Tensor(grid), t[0], t[1]), w)), coords

    return build


OP_CASES: dict[str, CaseBuilder] = {
    "add": _binary(add, (3, 4), (3, 4)),
    "add/broadcast": _binary(add, (1, 4), (3, 4)),
    "sub": _binary(sub, (3, 4), (4,), left=False),
    "mul": _binary(mul, (3, 4), (3, 4)),
    "mul/broadcast": _binary(mul, (4,), (3, 4)),
    "scale": _unary(lambda t: scale(t, -1.7), (3, 4)),
    "matmul/left": _binary(matmul, (3, 4), (4, 2)),
    "matmul/right": _binary(matmul, (4, 2), (3, 4), left=False),
    "conv2d/input": _binary(conv2d, (5, 5, 2), (3, 3, 2, 3)),
    "conv2d/kernel": _binary(conv2d, (3, 3, 2, 3), (5, 5, 2), left=False),
    "conv2d/batch": _binary(conv2d, (2, 4, 4, 2), (3, 3, 2, 3)),
    "relu": _unary(relu, (3, 4), _away_from),
    "exp": _unary(exp, (3, 4)),
    "log": _unary(log, (3, 4), lambda rng, shape: rng.uniform(0.5, 2.0, size=shape)),
    "sigmoid": _unary(sigmoid, (3, 4)),
    "softmax/rows": _unary(lambda t: softmax(t, axis=-1), (3, 4)),
    "softmax/columns": _unary(lambda t: softmax(t, axis=0), (3, 4)),
    "reduce_sum": _unary(lambda t: reduce_sum(t, axis=1), (3, 4)),
    "mean": _unary(lambda t: mean(t, axis=0), (3, 4)),
    "reshape": _unary(lambda t: reshape(t, (2, 6)), (3, 4)),
    "take": _unary(lambda t: take(t, (np.array([0, 2, 2]), np.array([1, 1, 3]))), (3, 4)),
    "gather_rows": _unary(lambda t: gather_rows(t, np.array([2, 0, 2, 1])), (3, 4)),
    "concatenate": _unary(lambda t: concatenate([t, Tensor(np.ones((2, 4))), t], axis=0), (3, 4)),
    "reduce_max": _unary(lambda t: reduce_max(t, axis=1), (3, 4), _distinct),
    "reduce_min": _unary(lambda t: reduce_min(t, axis=0), (3, 4), _distinct),
    "clip": _unary(lambda t: clip(t, -0.5, 0.5), (3, 4), _away_from_bounds),
    "bilinear_sample/grid": _bilinear_case("grid"),
    "bilinear_sample/coords": _bilinear_case("coords"),
}


def _random_simplex(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return softmax(Tensor(rng.normal(size=shape)), axis=-1)


def _interior_patches(rng: np.random.Generator, feat: np.ndarray, n: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Centers and offsets for `n` patches of `feat` that a finite-difference step cannot upset.

    Every sample lies at least 0.15 inside the map and off the bilinear cell
    boundaries, and per patch and channel the two largest and the two
    smallest samples differ by more than TIE_MARGIN.
    """
    height, width, _ = feat.shape
    k2 = size * size
    while True:
        centers = np.stack([rng.integers(0, width, size=n), rng.integers(0, height, size=n)], axis=1).astype(np.float64)
        cells = np.stack([rng.integers(0, width - 1, size=(n, k2)), rng.integers(0, height - 1, size=(n, k2))], axis=-1)
        offsets = cells + _fraction(rng, (n, k2, 2)) - centers[:, None, :] - base_grid(size)[None, :, :]
        samples = np.sort(sample_patches(Tensor(feat), centers, offsets, size).data, axis=1)
        gaps = np.concatenate([samples[:, -1] - samples[:, -2], samples[:, 1] - samples[:, 0]])
        if gaps.min() > TIE_MARGIN:
            return centers, offsets


def _pool_case(mode: str, wrt: str) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Case:
        feat = _distinct(rng, (6, 7, 2))
        centers, offsets = _interior_patches(rng, feat, 3, 3)
        w = rng.normal(size=(3, 2))
        if wrt == "feat":
            return (lambda t: _weighted(deformable_pool(t, centers, offsets, mode), w)), feat
        return (lambda t: _weighted(deformable_pool(Tensor(feat), centers, t, mode), w)), offsets

    return build


def _loss_cases() -> dict[str, CaseBuilder]:
    def kl(rng: np.random.Generator) -> Case:
        q = _random_simplex(rng, (4,))
        return (lambda t: kl_distance(softmax(t), q)), rng.normal(size=4)

    def cml_2d(rng: np.random.Generator) -> Case:
        p3d = _random_simplex(rng, (5, 3))
        return (lambda t: loss_cml(softmax(t), p3d)), rng.normal(size=(5, 3))

    def cml_3d(rng: np.random.Generator) -> Case:
        p2d = _random_simplex(rng, (5, 3))
        return (lambda t: loss_cml(p2d, softmax(t))), rng.normal(size=(5, 3))

    def triple_from(t: Tensor, centers: np.ndarray, offsets: np.ndarray, weight: Tensor) -> PooledTriple:
        pooled = {mode: deformable_pool(t, centers, offsets, mode) for mode in POOL_MODES}
        scores = {mode: softmax(matmul(v, weight)) for mode, v in pooled.items()}
        return PooledTriple(max_scores=scores["max"], min_scores=scores["min"], avg_scores=scores["avg"])

    def pooled_loss(loss: Callable[[PooledTriple, Tensor], Tensor]) -> CaseBuilder:
        def build(rng: np.random.Generator) -> Case:
            feat = _distinct(rng, (6, 7, 2))
            centers, offsets = _interior_patches(rng, feat, 3, 3)
            weight = Tensor(rng.normal(size=(2, 3)))
            p3d = _random_simplex(rng, (3, 3))
            return (lambda t: loss(triple_from(t, centers, offsets, weight), p3d)), feat

        return build

    def seg(rng: np.random.Generator) -> Case:
        labels = rng.integers(0, 3, size=5)
        other = _random_simplex(rng, (5, 3))
        return (lambda t: loss_seg(softmax(t), other, labels)), rng.normal(size=(5, 3))

    def adv(which: int) -> CaseBuilder:
        def build(rng: np.random.Generator) -> Case:
            src = sigmoid(Tensor(rng.normal(size=6)))
            return (lambda t: loss_adv(src, sigmoid(t))[which]), rng.normal(size=6)

        return build

    def disc(rng: np.random.Generator) -> Case:
        params = init_discriminator(DiscriminatorSpec(num_classes=3, hidden=(5, 4)), rng, "d1")
        params["d1.fc2.weight"] = rng.normal(size=params["d1.fc2.weight"].shape)
        rows = _random_simplex(rng, (4, 3))

        def f(t: Tensor) -> Tensor:
            return discriminate(rows, {**as_constants(params), "d1.fc0.weight": t}, "d1")[1]

        return f, params["d1.fc0.weight"]

    return {
        "kl_distance": kl,
        "loss_cml/2d-side": cml_2d,
        "loss_cml/3d-side": cml_3d,
        "loss_dscml": pooled_loss(loss_dscml),
        "loss_std_avg": pooled_loss(loss_std_avg),
        "loss_seg": seg,
        "loss_adv/d": adv(0),
        "loss_adv/g": adv(1),
        "discriminate": disc,
    }


LOSS_CASES = _loss_cases()
POOL_CASES: dict[str, CaseBuilder] = {
    f"deformable_pool/{mode}/{wrt}": _pool_case(mode, wrt) for mode in POOL_MODES for wrt in ("feat", "offsets")
}


def _grad_sweep(name: str, build: CaseBuilder, instances: int, seed: int) -> tuple[bool, str]:
    rng = random_stream(seed, f"verify/{name}")
    worst = 0.0
    for i in range(instances):
        f, x = build(rng)
        report = grad_check(f, x, step=GRAD_STEP, tol=GRAD_TOL, max_coords=SWEEP_COORDS, rng=rng)
        worst = max(worst, report.max_error)
        if not report.passed:
            return False, f"instance {i}: relative error {report.max_error:.3g} > {GRAD_TOL:g}"
    return True, f"{instances} instances, worst relative error {worst:.3g}"


def tiny_config(variant: str = "dscml+cmal") -> ExperimentConfig:
    """A miniature experiment used for composite checks."""
    return ExperimentConfig(
        variant=variant,
        data=DataConfig(height=12, width=16, num_points=24, num_classes=3, source_train=2, target_train=2, target_val=1, target_test=1),
        model=ModelConfig(feature_dim=4, patch_size=3, hidden_2d=(4,), hidden_3d=(6,), disc_hidden=(5,)),
        optim=OptimConfig(max_iters=4, batch_size=2),
    )


def _composite_check(name: str, seed: int) -> Iterator[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    config = tiny_config()
    dims = config.data.dims
    source = Split("source-train", tuple(generate_scene(s, shift_preset("none"), dims) for s in (11, 12)))
    target = Split(
        "target-train",
        tuple(generate_scene(s, shift_preset("day-night"), dims, domain="target") for s in (21, 22)),
    )
    state = init_state(config)
    rng = random_stream(seed, f"verify/{name}")
    # non-zero discriminator output layers so the adversarial term carries gradient
    disc = {k: v if not k.endswith("fc1.weight") else rng.normal(size=v.shape) for k, v in state.discriminators.items()}
    index = np.arange(2)

    for param in ("cls2d.weight", "cls3d.bias", "net3d.fc1.weight"):

        def f(t: Tensor, param: str = param) -> Tensor:
            params = {**as_constants(state.generator), param: t}
            total, _ = generator_objective(params, as_constants(disc), source, target, index, index, config)
            return total  # type: ignore[return-value]

        yield param, f, state.generator[param]


def check_composite(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for param, f, x in _composite_check("composite", seed):
        report = grad_check(f, x, step=GRAD_STEP, tol=GRAD_TOL, max_coords=12, rng=random_stream(seed, f"coords/{param}"))
        worst = max(worst, report.max_error)
        if not report.passed:
            return False, f"{param}: relative error {report.max_error:.3g} > {GRAD_TOL:g}"
    return True, f"worst relative error {worst:.3g}"


def check_offset_path(seed: int) -> tuple[bool, str]:
    """Loss gradient through the offset head, on the avg pooling path."""
    rng = random_stream(seed, "verify/offset-path")

    spec = GeneratorSpec.build(feature_dim=3, num_classes=3, patch_size=3, hidden_2d=(4,), hidden_3d=(4,))
    params = init_generator(spec, rng)
    image = rng.uniform(size=(8, 9, 3))
    centers = np.stack([rng.integers(2, 7, size=4), rng.integers(2, 6, size=4)], axis=1).astype(np.float64)
    bias = _fraction(rng, (18,))
    p3d = _random_simplex(rng, (4, 3))

    def f(t: Tensor) -> Tensor:
        tensors = {**as_constants(params), "offset.bias": t}
        feat = forward_2d(image, tensors)
        offsets = predict_offsets(feat, centers, tensors)
        avg = classify(deformable_pool(feat, centers, offsets, "avg"), tensors, "cls2d")
        return loss_std_avg(PooledTriple.degenerate(avg), p3d)

    report = grad_check(f, bias, step=GRAD_STEP, tol=GRAD_TOL)
    return report.passed, f"relative error {report.max_error:.3g}"


def check_networks(seed: int) -> tuple[bool, str]:
    rng = random_stream(seed, "verify/networks")

    spec = GeneratorSpec.build(feature_dim=3, num_classes=3, patch_size=3, hidden_2d=(4,), hidden_3d=(5,))
    params = init_generator(spec, rng)
    image = rng.uniform(size=(8, 8, 3))
    points = rng.uniform(-5.0, 5.0, size=(16, 3))
    w2d = rng.normal(size=(8, 8, 3))
    w3d = rng.normal(size=(16, 3))
    worst = 0.0
    cases = [
        ("net2d.conv0.weight", lambda t: _weighted(forward_2d(image, {**as_constants(params), "net2d.conv0.weight": t}), w2d)),
        ("net3d.fc0.weight", lambda t: _weighted(forward_3d(points, {**as_constants(params), "net3d.fc0.weight": t}), w3d)),
    ]
    for name, f in cases:
        report = grad_check(f, params[name], step=GRAD_STEP, tol=GRAD_TOL)
        worst = max(worst, report.max_error)
        if not report.passed:
            return False, f"{name}: relative error {report.max_error:.3g}"
    return True, f"worst relative error {worst:.3g}"


def check_pool_oracle(cases: int, seed: int) -> tuple[bool, str]:
    rng = random_stream(seed, "verify/pool-oracle")
    worst = 0.0
    for i in range(cases):
        height, width, depth = rng.integers(3, 9), rng.integers(3, 9), rng.integers(1, 4)
        size = int(rng.choice([1, 3, 5]))
        n = int(rng.integers(1, 5))
        mode = str(rng.choice(POOL_MODES))
        feat = rng.normal(size=(height, width, depth))
        centers = np.stack([rng.uniform(0, width, n), rng.uniform(0, height, n)], axis=1)
        offsets = rng.normal(scale=1.5, size=(n, size * size, 2))
        fast = deformable_pool(Tensor(feat), centers, offsets, mode).data
        slow = brute_force_pool(feat, centers, offsets, mode)
        error = float(np.max(np.abs(fast - slow)))
        worst = max(worst, error)
        if error > ORACLE_TOL:
            return False, f"case {i} ({mode}, K={size}): max difference {error:.3g}"
    return True, f"{cases} cases, max difference {worst:.3g}"


def check_square_coincidence(seed: int) -> tuple[bool, str]:
    """Zero offsets must reproduce the fixed square patch bit for bit."""
    rng = random_stream(seed, "verify/coincidence")
    for _ in range(20):
        feat = Tensor(rng.normal(size=(7, 9, 3)))
        centers = np.stack([rng.uniform(0, 9, 6), rng.uniform(0, 7, 6)], axis=1)
        zeros = np.zeros((6, 25, 2))
        weight = Tensor(rng.normal(size=(3, 4)))
        p3d = _random_simplex(rng, (6, 4))
        triples = []
        for pool in (
            lambda mode: square_pool(feat, centers, 5, mode),
            lambda mode: deformable_pool(feat, centers, zeros, mode),
        ):
            scores = {mode: softmax(matmul(pool(mode), weight)) for mode in POOL_MODES}
            triples.append(PooledTriple(scores["max"], scores["min"], scores["avg"]))
        fixed, deformed = (loss_dscml(t, p3d).item() for t in triples)
        if fixed != deformed:
            return False, f"square patch {fixed!r} != zero-offset deformable patch {deformed!r}"
        if not np.array_equal(sample_patches(feat, centers, None, 5).data, sample_patches(feat, centers, zeros, 5).data):
            return False, "patch samples differ"
    return True, "20 cases bit-identical"


def check_closed_forms(seed: int) -> tuple[bool, str]:
    rng = random_stream(seed, "verify/closed-forms")
    p = _random_simplex(rng, (5,))
    problems = []
    if kl_distance(p, p).item() != 0.0:
        problems.append("K(p, p) != 0")
    if abs(kl_distance(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item() - math.log(2)) > 1e-9:
        problems.append("K([1,0],[.5,.5]) != ln 2")
    rows = kl_rows(_random_simplex(rng, (10000, 4)), _random_simplex(rng, (10000, 4))).data
    if rows.min() < 0:
        problems.append(f"negative KL {rows.min():.3g}")
    for c in (2, 3, 6):
        uniform = Tensor(np.full((4, c), 1.0 / c))
        if abs(loss_seg(uniform, uniform, np.arange(4) % c).item() - 2 * math.log(c)) > 1e-9:
            problems.append(f"uniform loss_seg != 2 ln {c}")
    half = Tensor(np.full(8, 0.5))
    if abs(loss_adv(half, half)[0].item() - 2 * math.log(2)) > 1e-9:
        problems.append("fresh discriminator d_loss != 2 ln 2")
    return not problems, "; ".join(problems) or "all closed forms exact"


def check_miou(seed: int) -> tuple[bool, str]:
    rng = random_stream(seed, "verify/miou")
    problems = []
    truth = rng.integers(0, 4, size=200)
    if miou(truth, truth, 4).miou != 1.0:
        problems.append("perfect prediction != 1")
    pred = np.array([0] * 10)
    true = np.array([0] * 5 + [1] * 5)
    if miou(pred, true, 2).per_class[0] != 0.5:
        problems.append("TP=5, FP=5 != 0.5")
    pred = rng.integers(0, 4, size=200)
    base = miou(pred, truth, 4).miou
    order = rng.permutation(200)
    relabel = rng.permutation(4)
    if not math.isclose(miou(pred[order], truth[order], 4).miou, base, rel_tol=0, abs_tol=1e-15):
        problems.append("not invariant to sample order")
    if not math.isclose(miou(relabel[pred], relabel[truth], 4).miou, base, rel_tol=1e-12):
        problems.append("not invariant to class relabeling")
    return not problems, "; ".join(problems) or "hand-built cases exact"


def _timed(name: str, check: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = check()
    except Exception as e:  # a crashing check is a failed check
        passed, detail = False, f"{type(e).__name__}: {e}"
    seconds = time.perf_counter() - start
    if not passed:
        logger.error("check %s failed: %s", name, detail)
    return CheckResult(name=name, passed=passed, seconds=seconds, detail=detail)


def run_battery(instances: int = 100, oracle_cases: int = 1000, seed: int = 0) -> list[CheckResult]:
    """
    Run every check and time it.

    Args:
        instances: Random instances per gradient check
        oracle_cases: Random cases for the pooling oracle
        seed: Root of the named random streams the checks draw from
    """
    results = []
    for name, build in {**OP_CASES, **POOL_CASES, **LOSS_CASES}.items():
        results.append(_timed(f"grad/{name}", lambda name=name, build=build: _grad_sweep(name, build, instances, seed)))
    results.append(_timed("grad/networks", lambda: check_networks(seed)))
    results.append(_timed("grad/offset-path", lambda: check_offset_path(seed)))
    results.append(_timed("grad/composite-training-loss", lambda: check_composite(seed)))
    results.append(_timed("pooling/oracle", lambda: check_pool_oracle(oracle_cases, seed)))
    results.append(_timed("pooling/square-coincidence", lambda: check_square_coincidence(seed)))
    results.append(_timed("losses/closed-forms", lambda: check_closed_forms(seed)))
    results.append(_timed("losses/miou", lambda: check_miou(seed)))
    return results
