"""Finite-difference oracle for every differentiable operation.

Each case builds fresh float64 inputs, reduces the op output to a scalar
with a fixed random cotangent, and compares the taped gradient against
central differences. Op functions are looked up on their modules at call
time, so patching one (e.g. with a broken backward) is seen by the suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from denet import bim, edge, losses, network, ops
from denet.tensor import Tensor

STEP = 1e-5
OP_TOL = 1e-4
E2E_TOL = 1e-3
GRAD_FLOOR = 1e-6
MAX_COORDS = 48
# a second difference this large next to the first difference means the
# probe straddles a kink (relu, clamp); such probes are redone with a finer step
KINK_RATIO = 1e-3
KINK_REFINE = 100.0

Case = tuple[list[Tensor], Callable[[], Tensor]]


def finite_diff_grad(f: Callable, x, h: float = STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array.

    ``x`` may be an array or a Tensor; ``f`` receives the same kind and may
    return a float or a scalar Tensor.
    """
    wrap = isinstance(x, Tensor)
    x = np.array(x.data if wrap else x, dtype=np.float64)

    def value() -> float:
        out = f(Tensor(x) if wrap else x)
        return float(out.item() if isinstance(out, Tensor) else out)

    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = value()
        flat[i] = old - h
        fm = value()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Largest absolute discrepancy over the largest gradient magnitude (floored)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _params(module) -> list[Tensor]:
    return list(module.parameters().values())


def check_case(tensors: Sequence[Tensor], fn: Callable[[], Tensor], rng: np.random.Generator,
               h: float = STEP, max_coords: int = MAX_COORDS) -> float:
    """Relative error between taped and central-difference gradients for one draw.

    All coordinates are probed when there are at most ``max_coords`` of
    them; otherwise a random subset plus one random direction through every
    tensor at once.
    """
    out = fn()
    cot = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float(np.sum(fn().data * cot))

    for t in tensors:
        t.zero_grad()
    loss = ops.sum(out * Tensor(cot))
    loss.backward()
    grads = [t.grad.copy() for t in tensors]

    sizes = [t.data.size for t in tensors]
    total = int(np.sum(sizes))
    if total <= max_coords:
        coords = [(k, j) for k, s in enumerate(sizes) for j in range(s)]
    else:
        offsets = np.cumsum([0] + sizes)
        coords = []
        for c in rng.choice(total, size=max_coords, replace=False):
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            coords.append((k, int(c - offsets[k])))

    f0 = scalar()

    def probe(shift: Callable[[float], None]) -> float:
        step = h
        for _ in range(2):
            shift(step)
            fp = scalar()
            shift(-step)
            fm = scalar()
            shift(0.0)
            if abs(fp - 2.0 * f0 + fm) <= KINK_RATIO * abs(fp - fm):
                break
            step = h / KINK_REFINE
        return (fp - fm) / (2 * step)

    analytic, numeric = [], []
    for k, j in coords:
        flat_view = tensors[k].data.reshape(-1)
        old = flat_view[j]

        def shift_coord(d: float, flat_view=flat_view, j=j, old=old) -> None:
            flat_view[j] = old + d

        analytic.append(grads[k].reshape(-1)[j])
        numeric.append(probe(shift_coord))

    if total > max_coords:
        dirs = [rng.standard_normal(t.shape) for t in tensors]
        norm = np.sqrt(sum(np.sum(d * d) for d in dirs))
        dirs = [d / norm for d in dirs]
        base = [t.data.copy() for t in tensors]

        def shift_dir(d: float) -> None:
            for t, b, u in zip(tensors, base, dirs):
                t.data = b + d * u if d else b.copy()

        analytic.append(sum(np.sum(g * d) for g, d in zip(grads, dirs)))
        numeric.append(probe(shift_dir))
    return relative_error(np.array(analytic), np.array(numeric))


# ---------------------------------------------------------------------------
# cases: each returns (tensors to probe, closure producing the op output)
# ---------------------------------------------------------------------------

def _conv2d(rng) -> Case:
    x = _leaf(rng, (2, 3, 6, 6))
    w = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    stride = int(rng.integers(1, 3))
    return [x, w, b], lambda: ops.conv2d(x, w, b, stride=stride, pad=1)


def _depthwise(rng) -> Case:
    x = _leaf(rng, (2, 3, 5, 5))
    w = _leaf(rng, (3, 3, 3))
    return [x, w], lambda: ops.depthwise_conv2d(x, w)


def _conv1x1(rng) -> Case:
    x = _leaf(rng, (2, 3, 4, 4))
    w = _leaf(rng, (5, 3))
    b = _leaf(rng, (5,))
    return [x, w, b], lambda: ops.conv1x1(x, w, b)


def _matmul(rng) -> Case:
    a = _leaf(rng, (2, 3, 4))
    b = _leaf(rng, (4, 5))
    return [a, b], lambda: ops.matmul(a, b)


def _softmax(rng) -> Case:
    x = _leaf(rng, (3, 6), -3.0, 3.0)
    return [x], lambda: ops.softmax_rows(x)


def _sigmoid(rng) -> Case:
    x = _leaf(rng, (4, 5), -4.0, 4.0)
    return [x], lambda: ops.sigmoid(x)


def _gap(rng) -> Case:
    x = _leaf(rng, (2, 3, 4, 5))
    return [x], lambda: ops.global_avg_pool(x)


def _resize(rng) -> Case:
    x = _leaf(rng, (2, 4, 6))
    size = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    return [x], lambda: ops.bilinear_resize(x, *size)


def _instance_norm(rng) -> Case:
    x = _leaf(rng, (2, 3, 4, 4))
    return [x], lambda: ops.instance_norm(x)


def _sobel_seed(rng) -> Case:
    x = _leaf(rng, (1, 6, 6), 0.0, 1.0)
    return [x], lambda: edge.sobel_seed(x)


def _gated_input(rng) -> Case:
    stage = edge.EdgeRefinerStage(1, 3, 2, rng)
    t = _leaf(rng, (2, 3, 5, 5))
    e = _leaf(rng, (2, 1, 5, 5), 0.0, 1.0)
    return [t, e] + _params(stage), lambda: edge.gated_input(t, e, stage)


def _taylor_update(rng) -> Case:
    g, n, p = (_leaf(rng, (2, 3, 4, 4)) for _ in range(3))
    return [g, n, p], lambda: edge.taylor_update(g, n, p)


def _local_attention(rng) -> Case:
    la = bim.LocalAttention(4, rng)
    x = _leaf(rng, (2, 4, 5, 5))
    return [x] + _params(la), lambda: bim.local_self_attention(x, la)


def _global_attention(rng) -> Case:
    proj = bim.Projections(4, 4, rng)
    out = bim.Conv1x1(4, 4, rng)
    x = _leaf(rng, (2, 4, 3, 3))
    w = _leaf(rng, (), 0.0, 0.5)
    d2 = Tensor(bim.pairwise_sq_dist(3, 3))
    return [x, w] + _params(proj) + _params(out), \
        lambda: bim.global_self_attention(x, proj, out, w, d2, 2)


def _cross_attention(rng) -> Case:
    qp = bim.Projections(4, 4, rng)
    kvp = bim.Projections(6, 4, rng)
    restore = bim.Conv1x1(4, 4, rng)
    xq = _leaf(rng, (2, 4, 3, 3))
    xkv = _leaf(rng, (2, 6, 3, 3))
    w = _leaf(rng, (), 0.0, 0.5)
    d2 = Tensor(bim.pairwise_sq_dist(3, 3))
    return [xq, xkv, w] + _params(qp) + _params(kvp) + _params(restore), \
        lambda: bim.cross_attention(xq, xkv, qp, kvp, restore, w, d2, 2)


def _bce(rng) -> Case:
    p = _leaf(rng, (2, 1, 4, 4), 0.05, 0.95)
    y = (rng.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
    return [p], lambda: losses.bce_loss(p, y)


def _soft_iou(rng) -> Case:
    p = _leaf(rng, (2, 1, 4, 4), 0.0, 1.0)
    y = (rng.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
    per_sample = bool(rng.integers(0, 2))
    return [p], lambda: losses.soft_iou_loss(p, y, per_sample=per_sample)


def _end_to_end(rng) -> Case:
    cfg = network.shrunken_config(seed=int(rng.integers(0, 2**31)))
    model = network.build_model(cfg)
    image = rng.uniform(0.0, 1.0, size=(2, 1) + cfg.input_size)
    mask = (rng.random((2, 1) + cfg.input_size) < 0.1).astype(np.float64)
    edge_gt = np.stack([losses.edge_gt_from_mask(m) for m in mask])
    weights = losses.LossWeights()

    def fn() -> Tensor:
        out = model(Tensor(image))
        return losses.total_loss(ops.sigmoid(out["edge_logits"]), edge_gt,
                                 ops.sigmoid(out["mask_logits"]), mask, weights)

    return _params(model), fn


@dataclass(frozen=True)
class OpCheck:
    name: str
    build: Callable[[np.random.Generator], Case]
    tol: float = OP_TOL


OP_CHECKS: tuple[OpCheck, ...] = (
    OpCheck("conv2d", _conv2d),
    OpCheck("depthwise_conv2d", _depthwise),
    OpCheck("conv1x1", _conv1x1),
    OpCheck("matmul", _matmul),
    OpCheck("softmax", _softmax),
    OpCheck("sigmoid", _sigmoid),
    OpCheck("global_avg_pool", _gap),
    OpCheck("bilinear_resize", _resize),
    OpCheck("instance_norm", _instance_norm),
    OpCheck("sobel_seed", _sobel_seed),
    OpCheck("gated_input", _gated_input),
    OpCheck("taylor_update", _taylor_update),
    OpCheck("local_attention", _local_attention),
    OpCheck("global_attention", _global_attention),
    OpCheck("cross_attention", _cross_attention),
    OpCheck("bce", _bce),
    OpCheck("soft_iou", _soft_iou),
    OpCheck("end_to_end_shrunken", _end_to_end, E2E_TOL),
)


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} worst_rel_err={self.worst:.3e} tol={self.tol:.0e} trials={self.trials}"


def run_check(check: OpCheck, trials: int = 50, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        tensors, fn = check.build(rng)
        try:
            err = check_case(tensors, fn, rng)
        except Exception:  # a crashing backward is a failure of that op, not of the suite
            err = float("inf")
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    return CheckResult(check.name, worst, check.tol, trials, time.perf_counter() - start)


def run_all(trials: int = 50, seed: int = 0, names: Optional[Sequence[str]] = None,
            log: Optional[Callable[[str], None]] = None) -> list[CheckResult]:
    results = []
    for check in OP_CHECKS:
        if names is not None and check.name not in names:
            continue
        res = run_check(check, trials, seed)
        if log is not None:
            log(res.line())
        results.append(res)
    return results
