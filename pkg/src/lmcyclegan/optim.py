"""Adam and the learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


CHUNK = 1 << 15


def _update(p, g, m, v, f, lr, beta1, beta2, eps, bc1, bc2):
    """Flat in-place update, chunked so the temporaries stay in cache. Each
    operation rounds exactly like the textbook expression, except that moments
    falling below the smallest normal float are flushed to zero."""
    b1, c1, b2, c2 = f(beta1), f(1 - beta1), f(beta2), f(1 - beta2)
    bc1, bc2, lr, eps = f(bc1), f(bc2), f(lr), f(eps)
    tiny = np.finfo(p.dtype).tiny
    n = p.size
    buf = np.empty(min(n, CHUNK), dtype=p.dtype)
    buf2 = np.empty_like(buf)
    mask = np.empty(buf.shape, dtype=bool)
    for i in range(0, n, CHUNK):
        j = min(i + CHUNK, n)
        gs, ms, vs = g[i:j], m[i:j], v[i:j]
        a, b = buf[:j - i], buf2[:j - i]
        np.multiply(gs, c1, out=a)
        ms *= b1
        ms += a
        np.multiply(gs, gs, out=a)
        a *= c2
        vs *= b2
        vs += a
        # moments of dead units decay geometrically into subnormals, which
        # are an order of magnitude slower on most CPUs. Multiplying by the
        # mask is branch-free; copyto(where=) mispredicts on sparse gradients.
        k = mask[:j - i]
        np.greater_equal(np.abs(ms, out=a), tiny, out=k)
        np.multiply(ms, k, out=ms)
        np.greater_equal(vs, tiny, out=k)
        np.multiply(vs, k, out=vs)
        np.divide(vs, bc2, out=a)
        np.sqrt(a, out=a)
        a += eps
        np.divide(ms, bc1, out=b)
        b *= lr
        b /= a
        p[i:j] -= b


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update, applied in place to ``params``; returns the advanced state.

    Every parameter must have a gradient of identical shape. A zero gradient on
    a fresh state leaves the parameter untouched.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.step += 1
    t = state.step
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient {g.shape} vs parameter {p.data.shape} for {name}")
        dt = p.data.dtype
        g = g.astype(dt, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if not (p.data.flags.writeable and p.data.flags.c_contiguous):
            p.data = p.data.copy()
        _update(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                dt.type, lr, beta1, beta2, eps, bc1, bc2)
    return state


class Adam:
    """Adam bound to one named parameter group."""

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray], lr: float):
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)


def polynomial_decay(lr0: float, it: int, total: int, power: float = 1.0) -> float:
    """Constant for the first half of ``total``, then polynomial decay to 0.

    ``it`` past ``total`` gives 0.
    """
    if total <= 0 or it >= total:
        return 0.0
    if it < 0:
        raise ValueError(f"iteration must be >= 0, got {it}")
    half = total / 2
    if it <= half:
        return lr0
    return lr0 * (1 - (it - half) / (total - half)) ** power
