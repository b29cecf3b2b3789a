"""Tensor value type and reverse-mode gradient evaluation.

Every op in :mod:`lmcyclegan.ops` returns a :class:`Tensor` whose ``_parents``
and ``_backward`` fields form the recorded graph. :func:`backward` walks that
graph in reverse topological order and only visits the part of it that leads
to the requested leaves, so a generator loss never touches discriminator
weight gradients and vice versa.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_DTYPE = [np.float32]
_SEQ = itertools.count()


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def shadow64():
    """Run everything created inside the block in float64 (gradient checks)."""
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name
        self._seq = -1

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite output from op {op!r} (shape {data.shape})")
        t = cls.__new__(cls)
        t.data = data
        t.name = None
        t.op = op
        t._seq = next(_SEQ)
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        t.name = None
        t._seq = -1
        return t

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Thin operator sugar; the real implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, k):
        from . import ops
        return ops.mul_scalar(self, k)

    __rmul__ = __mul__


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents first. Sorting by creation
    sequence makes the order independent of how the graph is explored, so
    adding an unrelated branch never reorders gradient accumulation."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.sort(key=lambda t: t._seq)
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict:
    """Gradients of scalar ``loss`` with respect to the leaves in ``wrt``.

    ``wrt`` may be a name->Tensor mapping (result keyed by name) or an
    iterable of tensors (result keyed by position). When omitted, every
    requires_grad leaf reachable from ``loss`` is returned, keyed by ``id``.
    Leaves that cannot be reached get zero gradients of their own shape.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)

    if wrt is None:
        leaves = {id(t): t for t in order if t.is_leaf and t.requires_grad}
        keys = list(leaves)
    elif isinstance(wrt, Mapping):
        leaves = {id(t): t for t in wrt.values()}
        keys = list(wrt)
    else:
        wrt = list(wrt)
        leaves = {id(t): t for t in wrt}
        keys = list(range(len(wrt)))

    needs: dict[int, bool] = {}
    for t in order:
        if t.is_leaf:
            needs[id(t)] = id(t) in leaves
        else:
            needs[id(t)] = any(needs[id(p)] for p in t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        if t.is_leaf or not needs[id(t)]:
            continue
        g = grads.pop(id(t), None)
        if g is None:
            continue
        flags = [needs[id(p)] for p in t._parents]
        pgrads = t._backward(g, flags)
        for p, need, pg in zip(t._parents, flags, pgrads):
            if not need or pg is None:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg

    def grad_of(t):
        g = grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    if wrt is None:
        return {k: grad_of(leaves[k]) for k in keys}
    if isinstance(wrt, Mapping):
        return {name: grad_of(t) for name, t in wrt.items()}
    return {i: grad_of(t) for i, t in zip(keys, wrt)}
