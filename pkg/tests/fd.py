"""Central finite-difference oracle for the op battery.

Each case builds its inputs in float64 (``shadow64``), reduces the op output
to a scalar with a fixed random target, and compares the analytic gradient
of every input against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from lmcyclegan import ops
from lmcyclegan.tensor import Tensor, backward, shadow64

EPS = 1e-3
TOL = 1e-4
SHAPES_PER_OP = 20


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    """Max-norm relative error; the scale floor keeps all-zero gradients sane."""
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def _scalarize(out: Tensor, target: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return out
    return ops.mse_mean(out, Tensor(target))


def check(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator, eps: float = EPS) -> float:
    """Largest relative error over all inputs of ``fn``."""
    with shadow64():
        leaves = [Tensor(a, requires_grad=True) for a in inputs]
        out = fn(*leaves)
        target = None if out.data.size == 1 else rng.standard_normal(out.shape)
        analytic = backward(_scalarize(out, target), leaves)

        def value(arrs):
            return _scalarize(fn(*[Tensor(a) for a in arrs]), target).item()

        worst = 0.0
        for i, a in enumerate(inputs):
            a = np.array(a, dtype=np.float64)
            num = np.zeros_like(a)
            flat = a.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + eps
                up = value(inputs[:i] + [a] + inputs[i + 1:])
                flat[j] = old - eps
                down = value(inputs[:i] + [a] + inputs[i + 1:])
                flat[j] = old
                num.reshape(-1)[j] = (up - down) / (2 * eps)
            worst = max(worst, rel_error(analytic[i], num))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    """Values with |v| >= margin, so kinks sit outside the difference stencil."""
    v = rng.standard_normal(shape)
    return np.where(v >= 0, v + margin, v - margin)


# ---------------------------------------------------------------- case generators
# Each returns (fn, inputs) for one randomized shape.

def _conv2d(rng):
    n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3, 4]))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 2))
    h = int(rng.integers(max(k, 3), 7))
    w = int(rng.integers(max(k, 3), 7))
    bias = bool(rng.integers(0, 2))
    inputs = [rng.standard_normal((n, ci, h, w)), rng.standard_normal((co, ci, k, k))]
    if bias:
        inputs.append(rng.standard_normal(co))
    return (lambda x, wt, *b: ops.conv2d(x, wt, b[0] if b else None, s, p)), inputs


def _conv_transpose2d(rng):
    n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([2, 3, 4]))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, min(2, k)))
    op = int(rng.integers(0, s)) if s > 1 else 0
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    bias = bool(rng.integers(0, 2))
    inputs = [rng.standard_normal((n, ci, h, w)), rng.standard_normal((ci, co, k, k))]
    if bias:
        inputs.append(rng.standard_normal(co))
    return (lambda x, wt, *b: ops.conv_transpose2d(x, wt, b[0] if b else None, s, p, op)), inputs


def _fully_connected(rng):
    n, c, h, w, o = (int(v) for v in rng.integers(1, 4, size=5))
    return ops.fully_connected, [rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c * h * w)),
                                 rng.standard_normal(o)]


def _shape4(rng, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi, size=4))


def _leaky_relu(rng):
    alpha = float(rng.uniform(0.01, 0.5))
    return (lambda x: ops.leaky_relu(x, alpha)), [away_from_zero(rng, _shape4(rng))]


def _relu(rng):
    return ops.relu, [away_from_zero(rng, _shape4(rng))]


def _tanh(rng):
    return ops.tanh, [rng.standard_normal(_shape4(rng))]


def _sigmoid(rng):
    return ops.sigmoid, [3 * rng.standard_normal(_shape4(rng))]


def _sqrt(rng):
    return ops.sqrt, [rng.uniform(0.2, 3.0, _shape4(rng))]


def _instance_norm(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = rng.standard_normal((n, c, h, w))
    if rng.integers(0, 2):
        return ops.instance_norm, [x, rng.standard_normal(c), rng.standard_normal(c)]
    return ops.instance_norm, [x]


def _add(rng):
    s = _shape4(rng)
    return ops.add, [rng.standard_normal(s), rng.standard_normal(s)]


def _sub(rng):
    s = _shape4(rng)
    return ops.sub, [rng.standard_normal(s), rng.standard_normal(s)]


def _mul_scalar(rng):
    k = float(rng.uniform(-3, 3))
    return (lambda x: ops.mul_scalar(x, k)), [rng.standard_normal(_shape4(rng))]


def _sum_scalars(rng):
    m = int(rng.integers(1, 5))
    wts = [float(v) for v in rng.uniform(0, 3, m)]
    return (lambda *ts: ops.sum_scalars(list(ts), wts)), [rng.standard_normal(()) for _ in range(m)]


def _concat_channels(rng):
    n, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    m = int(rng.integers(1, 4))
    return (lambda *ts: ops.concat_channels(list(ts))), [
        rng.standard_normal((n, int(rng.integers(1, 4)), h, w)) for _ in range(m)]


def _crop(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    H, W = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    w, h = int(rng.integers(1, W + 1)), int(rng.integers(1, H + 1))
    x0, y0 = int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1))
    return (lambda x: ops.crop(x, x0, y0, w, h)), [rng.standard_normal((n, c, H, W))]


def _take_rows(rng):
    n = int(rng.integers(1, 5))
    a = int(rng.integers(0, n))
    b = int(rng.integers(a + 1, n + 1))
    return (lambda x: ops.take_rows(x, a, b)), [rng.standard_normal((n, 2, 3, 3))]


def _resize_bilinear(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    return (lambda x: ops.resize_bilinear(x, oh, ow)), [rng.standard_normal((n, c, h, w))]


def _global_avg_pool(rng):
    return ops.global_avg_pool, [rng.standard_normal(_shape4(rng, 1, 5))]


def _l1_mean(rng):
    s = _shape4(rng)
    a = rng.standard_normal(s)
    return ops.l1_mean, [a, a - away_from_zero(rng, s)]


def _l2_mean(rng):
    return ops.l2_mean, [rng.standard_normal(_shape4(rng))]


def _mse_mean(rng):
    s = _shape4(rng)
    return ops.mse_mean, [rng.standard_normal(s), rng.standard_normal(s)]


def _bce_with_logits_mean(rng):
    t = float(rng.choice([0.0, 1.0, rng.uniform()]))
    return (lambda z: ops.bce_with_logits_mean(z, t)), [3 * rng.standard_normal(_shape4(rng))]


CASES: dict[str, Callable] = {
    "conv2d": _conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "fully_connected": _fully_connected,
    "leaky_relu": _leaky_relu,
    "relu": _relu,
    "tanh": _tanh,
    "sigmoid": _sigmoid,
    "sqrt": _sqrt,
    "instance_norm": _instance_norm,
    "add": _add,
    "sub": _sub,
    "mul_scalar": _mul_scalar,
    "sum_scalars": _sum_scalars,
    "concat_channels": _concat_channels,
    "crop": _crop,
    "take_rows": _take_rows,
    "resize_bilinear": _resize_bilinear,
    "global_avg_pool": _global_avg_pool,
    "l1_mean": _l1_mean,
    "l2_mean": _l2_mean,
    "mse_mean": _mse_mean,
    "bce_with_logits_mean": _bce_with_logits_mean,
}


@dataclass
class OpResult:
    op: str
    n_shapes: int
    worst: float
    shapes: list

    @property
    def ok(self) -> bool:
        return self.n_shapes >= SHAPES_PER_OP and self.worst < TOL


def run_op(name: str, n: int = SHAPES_PER_OP, seed: int = 0) -> OpResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, shapes = 0.0, []
    for _ in range(n):
        fn, inputs = CASES[name](rng)
        shapes.append(tuple(np.shape(a) for a in inputs))
        worst = max(worst, check(fn, inputs, rng))
    return OpResult(name, n, worst, shapes)


def run_battery(seed: int = 0) -> tuple[list[OpResult], float]:
    t0 = time.perf_counter()
    results = [run_op(name, seed=seed) for name in CASES]
    return results, time.perf_counter() - t0
