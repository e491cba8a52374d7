"""Reverse-mode automatic differentiation on a recorded tape.

A :class:`Tape` owns an append-only list of nodes. Leaves are created with
:meth:`Tape.var`; every operation whose operands include a :class:`Var`
appends a node holding the parent ids and one vector-Jacobian product per
parent. :func:`grad` sweeps the nodes in reverse id order, so replays are
deterministic.

The module-level functions (``relu``, ``minimum``, ``where``, ...) accept
either ``Var`` or plain arrays. With no ``Var`` among the operands they fall
through to numpy and record nothing, which lets the bound engines run the
same code for certification (numpy in, numpy out) and for training.

Subgradient conventions: ``abs`` and ``relu`` have derivative 0 at 0;
``minimum``/``maximum`` route the gradient to the first argument on ties;
masks passed to ``where`` are constants.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ContractError(ValueError):
    """Misuse of the tape (non-scalar loss, foreign leaves, mixed tapes)."""


class _Node:
    __slots__ = ("parents", "vjps")

    def __init__(self, parents: tuple[int, ...], vjps: tuple[Callable, ...]):
        self.parents = parents
        self.vjps = vjps


class Tape:
    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def var(self, value) -> "Var":
        """Register a leaf holding a float64 copy of ``value``."""
        arr = np.array(value, dtype=np.float64)
        return self._record(arr, (), ())

    def _record(self, value: np.ndarray, parents, vjps) -> "Var":
        node_id = len(self._nodes)
        self._nodes.append(_Node(tuple(p.id for p in parents), tuple(vjps)))
        return Var(value, self, node_id)

    def grad(self, loss: "Var", leaves: Sequence["Var"]) -> list[np.ndarray]:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        for leaf in leaves:
            if not isinstance(leaf, Var) or leaf.tape is not self:
                raise ContractError("every leaf must be a Var recorded on this tape")

        adj: list[np.ndarray | None] = [None] * (loss.id + 1)
        adj[loss.id] = np.ones_like(loss.value)
        for node_id in range(loss.id, -1, -1):
            g = adj[node_id]
            if g is None:
                continue
            node = self._nodes[node_id]
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if adj[parent] is None:
                    adj[parent] = contrib
                else:
                    adj[parent] = adj[parent] + contrib
        out = []
        for leaf in leaves:
            g = adj[leaf.id] if leaf.id <= loss.id else None
            out.append(np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.value.shape))
        return out


def grad(loss: "Var", leaves: Sequence["Var"]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each leaf."""
    if not isinstance(loss, Var):
        raise ContractError("loss must be a Var")
    return loss.tape.grad(loss, leaves)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "id")
    # Make numpy defer to our reflected operators (ndarray @ Var -> Var.__rmatmul__).
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: Tape, node_id: int):
        self.value = value
        self.tape = tape
        self.id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def value(x) -> np.ndarray:
    """Underlying array of a Var, or ``x`` itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(out: np.ndarray, pairs) -> "Var | np.ndarray":
    """Record ``out`` with (operand, vjp) pairs; only Var operands get edges."""
    tape = _tape_of([a for a, _ in pairs])
    if tape is None:
        return out
    live = [(a, f) for a, f in pairs if isinstance(a, Var)]
    return tape._record(out, [a for a, _ in live], [f for _, f in live])


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _make(out, [(a, lambda g: unbroadcast(g, av.shape)),
                       (b, lambda g: unbroadcast(g, bv.shape))])


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _make(out, [(a, lambda g: unbroadcast(g, av.shape)),
                       (b, lambda g: unbroadcast(-g, bv.shape))])


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _make(out, [(a, lambda g: unbroadcast(g * bv, av.shape)),
                       (b, lambda g: unbroadcast(g * av, bv.shape))])


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _make(out, [(a, lambda g: unbroadcast(g / bv, av.shape)),
                       (b, lambda g: unbroadcast(-g * av / (bv * bv), bv.shape))])


def neg(a):
    av = value(a)
    return _make(-av, [(a, lambda g: -g)])


def matmul(a, b):
    """``a @ b`` with numpy semantics (1-D promotion, batch broadcasting)."""
    av, bv = value(a), value(b)
    out = av @ bv

    def _as2d():
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        return a2, b2

    def _g2(g):
        g = np.asarray(g)
        if av.ndim == 1:
            g = np.expand_dims(g, -2)
        if bv.ndim == 1:
            g = np.expand_dims(g, -1)
        return g

    def vjp_a(g):
        a2, b2 = _as2d()
        ga = _g2(g) @ np.swapaxes(b2, -1, -2)
        if av.ndim == 1:
            ga = ga[..., 0, :]
        return unbroadcast(ga, av.shape)

    def vjp_b(g):
        a2, b2 = _as2d()
        gb = np.swapaxes(a2, -1, -2) @ _g2(g)
        if bv.ndim == 1:
            gb = gb[..., :, 0]
        return unbroadcast(gb, bv.shape)

    return _make(out, [(a, vjp_a), (b, vjp_b)])


# ------------------------------------------------------------- elementwise

def abs(a):  # noqa: A001 - mirrors numpy naming
    av = value(a)
    return _make(np.abs(av), [(a, lambda g: g * np.sign(av))])


def relu(a):
    av = value(a)
    mask = av > 0
    return _make(np.where(mask, av, 0.0), [(a, lambda g: g * mask)])


def exp(a):
    av = value(a)
    out = np.exp(av)
    return _make(out, [(a, lambda g: g * out)])


def log(a):
    av = value(a)
    return _make(np.log(av), [(a, lambda g: g / av)])


def minimum(a, b):
    """Elementwise min; ties route the gradient to ``a``."""
    av, bv = value(a), value(b)
    take_a = av <= bv
    out = np.where(take_a, av, bv)
    return _make(out, [(a, lambda g: unbroadcast(g * take_a, av.shape)),
                       (b, lambda g: unbroadcast(g * ~take_a, bv.shape))])


def maximum(a, b):
    """Elementwise max; ties route the gradient to ``a``."""
    av, bv = value(a), value(b)
    take_a = av >= bv
    out = np.where(take_a, av, bv)
    return _make(out, [(a, lambda g: unbroadcast(g * take_a, av.shape)),
                       (b, lambda g: unbroadcast(g * ~take_a, bv.shape))])


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    return _make(out, [(a, lambda g: unbroadcast(g * mask, av.shape)),
                       (b, lambda g: unbroadcast(g * ~mask, bv.shape))])


# ---------------------------------------------------------------- reductions

def _expand_like(g, shape, axis, keepdims):
    g = np.asarray(g)
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), [(a, lambda g: _expand_like(g, av.shape, axis, keepdims).copy())])


def mean(a, axis=None, keepdims=False):
    av = value(a)
    count = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def l2norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; gradient taken as 0 at the zero vector."""
    av = value(a)
    n = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.where(n > 0, g * av / safe, 0.0)

    return _make(out, [(a, vjp)])


def l1norm(a, axis=-1, keepdims=False):
    return sum(abs(a), axis=axis, keepdims=keepdims)


def logsumexp(a, axis=-1):
    av = value(a)
    m = np.max(av, axis=axis, keepdims=True)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = np.exp(av - m) / s
    return _make(out, [(a, lambda g: np.expand_dims(np.asarray(g), axis) * soft)])


# -------------------------------------------------------------- restructuring

def getitem(a, idx):
    av = value(a)
    out = av[idx]

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return z

    return _make(np.array(out, dtype=np.float64), [(a, vjp)])


def reshape(a, shape):
    av = value(a)
    return _make(av.reshape(shape), [(a, lambda g: np.reshape(g, av.shape))])


def swapaxes(a, ax1, ax2):
    av = value(a)
    return _make(np.swapaxes(av, ax1, ax2), [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def expand_dims(a, axis):
    av = value(a)
    return _make(np.expand_dims(av, axis), [(a, lambda g: np.reshape(g, av.shape))])


def stack(items, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    pairs = []
    for k, x in enumerate(items):
        pairs.append((x, lambda g, k=k: np.take(g, k, axis=axis)))
    return _make(out, pairs)


def concatenate(items, axis=0):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for k, x in enumerate(items):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[k], bounds[k + 1])
        pairs.append((x, lambda g, sl=tuple(sl): np.asarray(g)[sl]))
    return _make(out, pairs)
