"""Differentiable operations over :class:`~lmcyclegan.tensor.Tensor`.

Images are NCHW. Convolutions go through im2col + one matmul; the transposed
convolution is implemented as the exact adjoint of :func:`conv2d`, so the two
share the same column buffers and the same index arithmetic.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

_make = Tensor._from_op


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_4d(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected NCHW input, got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Column matrix of shape (C*kh*kw, N*Ho*Wo), rows in weight order."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xc = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    """Adjoint of :func:`_im2col`: scatter-add columns back to an NCHW array."""
    n, c, h, w = shape
    g = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad + stride, w + 2 * pad + stride), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, i, j]
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))


def _to_cn(a: np.ndarray) -> np.ndarray:
    """NCHW -> (C, N*H*W)."""
    n, c, h, w = a.shape
    return a.reshape(c, h * w) if n == 1 else a.transpose(1, 0, 2, 3).reshape(c, n * h * w)


def _from_cn(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> contiguous NCHW."""
    c = a.shape[0]
    if n == 1:
        return np.ascontiguousarray(a).reshape(1, c, h, w)
    return np.ascontiguousarray(a.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with weight of shape (out_ch, in_ch, kh, kw)."""
    _check_4d(x, "conv2d")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    n = x.shape[0]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_cn(out, n, ho, wo)
    xshape = x.shape

    def bw(g, needs):
        gm = _to_cn(g)
        gx = gw = gb = None
        if needs[0]:
            gx = _col2im(wmat.T @ gm, xshape, kh, kw, stride, pad, ho, wo)
        if needs[1]:
            gw = (gm @ cols.T).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = gm.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
                     output_pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` is (in_ch, out_ch, kh, kw)."""
    _check_4d(x, "conv_transpose2d")
    ci, co, kh, kw = weight.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * pad + kh + output_pad
    wo = (w - 1) * stride - 2 * pad + kw + output_pad
    if conv_out_size(ho, kh, stride, pad) != h or conv_out_size(wo, kw, stride, pad) != w:
        raise ShapeError(f"conv_transpose2d: output_pad={output_pad} inconsistent with stride={stride}")
    wmat = weight.data.reshape(ci, -1)
    xm = _to_cn(x.data)
    out = _col2im(wmat.T @ xm, (n, co, ho, wo), kh, kw, stride, pad, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g, needs):
        cols, _, _ = _im2col(g, kh, kw, stride, pad)
        gx = gw = gb = None
        if needs[0]:
            gx = _from_cn(wmat @ cols, n, h, w)
        if needs[1]:
            gw = (xm @ cols.T).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv_transpose2d")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x`` is flattened per sample; weight is (out_features, in_features)."""
    n = x.shape[0]
    xm = x.data.reshape(n, -1)
    if xm.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} flattens to {xm.shape[1]}, weight expects {weight.shape}")
    out = xm @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xshape = x.shape

    def bw(g, needs):
        gx = (g @ weight.data).reshape(xshape) if needs[0] else None
        gw = g.T @ xm if needs[1] else None
        gb = g.sum(axis=0) if len(needs) > 2 and needs[2] else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "fully_connected")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data * alpha)
    return _make(out, (x,), lambda g, needs: (np.where(mask, g, g * alpha),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return _make(out, (x,), lambda g, needs: (np.where(mask, g, 0).astype(g.dtype),), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g, needs: (g * (1 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g, needs: (g * out * (1 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def sqrt(x: Tensor) -> Tensor:
    """Square root with a zero subgradient at 0."""
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bw(g, needs):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype),)

    return _make(out, (x,), bw, "sqrt")


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over H and W, optional affine."""
    _check_4d(x, "instance_norm")
    if (gamma is None) != (beta is None):
        raise ValueError("instance_norm: pass both gamma and beta or neither")
    c = x.shape[1]
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = xc * inv
    if gamma is not None:
        out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    else:
        out = xhat

    def bw(g, needs):
        gh = g * gamma.data.reshape(1, c, 1, 1) if gamma is not None else g
        gx = None
        if needs[0]:
            s1 = gh.sum(axis=(2, 3), keepdims=True)
            s2 = (gh * xhat).sum(axis=(2, 3), keepdims=True)
            gx = (inv / m) * (m * gh - s1 - xhat * s2)
        if gamma is None:
            return (gx,)
        gg = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gg, gb

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _make(out, parents, bw, "instance_norm")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g, needs: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g, needs: (g, -g), "sub")


def mul_scalar(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return _make(x.data * k, (x,), lambda g, needs: (g * k,), "mul_scalar")


def sum_scalars(terms: Sequence[Tensor], weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum of scalar tensors, accumulated left to right."""
    if weights is None:
        weights = [1.0] * len(terms)
    if len(terms) != len(weights) or not terms:
        raise ValueError("sum_scalars: need a non-empty, equal-length terms/weights pair")
    dtype = terms[0].data.dtype
    total = np.zeros((), dtype=dtype)
    for t, w in zip(terms, weights):
        if t.data.size != 1:
            raise ShapeError(f"sum_scalars: term of shape {t.shape} is not scalar")
        total = total + t.data.reshape(()) * dtype.type(w)
    wts = [float(w) for w in weights]
    shapes = [t.shape for t in terms]

    def bw(g, needs):
        return tuple((g * w).reshape(s) if need else None for w, s, need in zip(wts, shapes, needs))

    return _make(np.asarray(total, dtype=dtype), tuple(terms), bw, "sum_scalars")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    ref = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: shape mismatch {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g, needs):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if needs[i] else None for i in range(len(xs)))

    return _make(out, tuple(xs), bw, "concat_channels")


def crop(x: Tensor, x0: int, y0: int, w: int, h: int) -> Tensor:
    """Rectangle x in [x0, x0+w), y in [y0, y0+h)."""
    _check_4d(x, "crop")
    H, W = x.shape[2], x.shape[3]
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
        raise ShapeError(f"crop: rect x=[{x0},{x0 + w}) y=[{y0},{y0 + h}) outside image {x.shape}")
    out = np.ascontiguousarray(x.data[:, :, y0:y0 + h, x0:x0 + w])
    xshape = x.shape

    def bw(g, needs):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[:, :, y0:y0 + h, x0:x0 + w] = g
        return (gx,)

    return _make(out, (x,), bw, "crop")


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Batch slice ``x[start:stop]``."""
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"take_rows: [{start}, {stop}) outside batch of {n}")
    out = np.ascontiguousarray(x.data[start:stop])
    xshape = x.shape

    def bw(g, needs):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _make(out, (x,), bw, "take_rows")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_4d(x, "resize_bilinear")
    dt = x.data.dtype
    ry = bilinear_matrix(x.shape[2], out_h).astype(dt)
    rx = bilinear_matrix(x.shape[3], out_w).astype(dt)
    out = np.ascontiguousarray(np.matmul(np.matmul(ry, x.data), rx.T))

    def bw(g, needs):
        return (np.ascontiguousarray(np.matmul(np.matmul(ry.T, g), rx)),)

    return _make(out, (x,), bw, "resize_bilinear")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _make(out, (x,), bw, "global_avg_pool")


def _check_pair(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "l1_mean")
    d = a.data - b.data
    n = d.size
    out = np.asarray(np.abs(d).mean(), dtype=d.dtype)

    def bw(g, needs):
        s = np.sign(d) * (g / n)
        return s, -s

    return _make(out, (a, b), bw, "l1_mean")


def l2_mean(x: Tensor) -> Tensor:
    """Mean of squares of ``x``."""
    n = x.data.size
    out = np.asarray((x.data * x.data).mean(), dtype=x.data.dtype)
    return _make(out, (x,), lambda g, needs: (x.data * (2 * g / n),), "l2_mean")


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mse_mean")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).mean(), dtype=d.dtype)

    def bw(g, needs):
        s = d * (2 * g / n)
        return s, -s

    return _make(out, (a, b), bw, "mse_mean")


def bce_with_logits_mean(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a constant target."""
    if logits.data.size == 0:
        raise ShapeError("bce_with_logits_mean: empty batch")
    z = logits.data
    t = float(target)
    n = z.size
    out = np.asarray((np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean(), dtype=z.dtype)

    def bw(g, needs):
        return ((_sigmoid(z) - t) * (g / n),)

    return _make(out, (logits,), bw, "bce_with_logits_mean")
