"""Tape-based reverse-mode differentiation over a small, closed op set.

Every op in this module accepts either plain arrays or :class:`Var` values.
With plain arrays it simply computes the result (eager mode). When any input
is a :class:`Var`, the same computation runs and a node is appended to the
owning :class:`Tape`, so taped and untaped results are bit-identical.

>>> tape = Tape()
>>> w = tape.param("w", np.array([1.0, -2.0]))
>>> loss = sum_(tanh(w))
>>> grads = tape.backward(loss)
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor_core as tc

__all__ = [
    "Var", "Tape", "TapeError", "AllocationError", "allocation_guard", "value_of", "contract", "matmul", "reshape",
    "transpose", "slice_axis", "concat", "add", "sub", "mul", "neg", "tanh",
    "sigmoid", "sum_", "mean", "l2_normalize", "logsumexp",
    "softmax_cross_entropy", "gradcheck", "inject_fault",
]


class TapeError(RuntimeError):
    pass


class Var:
    """A value tracked by a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


@dataclass
class Node:
    op: str
    inputs: tuple
    output: int
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of the ops executed on tracked values.

    A tape supports exactly one backward pass.
    """

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Var] = field(default_factory=dict)
    _n_values: int = 0
    _consumed: bool = False

    def _new_var(self, value, name=None) -> Var:
        var = Var(value, self, self._n_values, name)
        self._n_values += 1
        return var

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        var = self._new_var(np.asarray(value), name)
        self.params[name] = var
        return var

    def watch(self, params: dict) -> dict:
        """Register every array in ``params`` and return name -> Var."""
        return {name: self.param(name, v) for name, v in params.items()}

    def record(self, op, inputs, value, vjp) -> Var:
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        out = self._new_var(value)
        self.nodes.append(Node(op, tuple(inputs), out.index, vjp))
        return out

    def backward(self, output: Var, seed=None) -> dict[str, np.ndarray]:
        """Propagate adjoints from ``output`` and return the gradient map.

        Parameters never reached by the output receive zero gradients.
        """
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("output is not a value recorded on this tape")
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.shape:
            raise TapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        self._consumed = True

        adjoints: dict[int, np.ndarray] = {output.index: seed}
        for node in reversed(self.nodes):
            g = adjoints.pop(node.output, None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if not isinstance(inp, Var) or gi is None:
                    continue
                prev = adjoints.get(inp.index)
                adjoints[inp.index] = gi if prev is None else prev + gi
        return {
            name: adjoints.get(var.index, np.zeros_like(var.value))
            for name, var in self.params.items()
        }


def _tape_of(*inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("inputs belong to different tapes")
    return tape


def _emit(op, inputs, value, make_vjp):
    if _forbidden_shapes:
        _check_allocation(op, value)
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(op, inputs, value, make_vjp())


# ---------------------------------------------------------------------------
# allocation guard

class AllocationError(RuntimeError):
    pass


_forbidden_shapes: list[set] = []


def guard_active() -> bool:
    return bool(_forbidden_shapes)


def _check_allocation(op, value):
    tail = tuple(np.shape(value)[-2:])
    for shapes in _forbidden_shapes:
        if tail in shapes:
            raise AllocationError(f"{op} produced an array ending in forbidden matrix shape {tail}")


@contextlib.contextmanager
def allocation_guard(forbidden: Sequence[tuple[int, int]]) -> Iterator[None]:
    """Fail any op whose output ends in one of the ``forbidden`` matrix shapes.

    Dense TT reconstruction is refused outright while a guard is active.
    """
    shapes = {tuple(s) for s in forbidden}
    _forbidden_shapes.append(shapes)
    try:
        yield
    finally:
        _forbidden_shapes.remove(shapes)


# ---------------------------------------------------------------------------
# fault injection (negative controls for the gradient checker)

_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(op: str) -> Iterator[None]:
    """Deliberately corrupt the backward rule of ``op`` inside the block."""
    _faults.add(op)
    try:
        yield
    finally:
        _faults.discard(op)


# ---------------------------------------------------------------------------
# ops

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def contract(a, b, axes_a: Sequence[int], axes_b: Sequence[int]):
    av, bv = value_of(a), value_of(b)
    out = tc.contract(av, bv, axes_a, axes_b)

    def make_vjp():
        ia = [ax % av.ndim for ax in axes_a]
        ib = [ax % bv.ndim for ax in axes_b]
        free_a = [i for i in range(av.ndim) if i not in ia]
        free_b = [i for i in range(bv.ndim) if i not in ib]
        na = len(free_a)
        out_free_b = list(range(na, na + len(free_b)))
        out_free_a = list(range(na))

        def vjp(g):
            ga = gb = None
            if isinstance(a, Var):
                # g[free_a, free_b] . b[..] over free_b -> [free_a, remaining b axes (ib, b order)]
                t = tc.contract(g, bv, out_free_b, free_b)
                rem_b = sorted(ib)
                src_axes = free_a + [ia[ib.index(j)] for j in rem_b]
                ga = np.transpose(t, np.argsort(src_axes))
            if isinstance(b, Var):
                t = tc.contract(av, g, free_a, out_free_a)
                rem_a = sorted(ia)
                src_axes = [ib[ia.index(i)] for i in rem_a] + free_b
                gb = np.transpose(t, np.argsort(src_axes))
            return ga, gb
        return vjp

    return _emit("contract", (a, b), out, make_vjp)


def matmul(a, b):
    """Contract the last axis of ``a`` with the first axis of ``b``."""
    return contract(a, b, [value_of(a).ndim - 1], [0])


def reshape(a, shape):
    av = value_of(a)
    out = tc.reshape(av, shape)
    return _emit("reshape", (a,), out, lambda: lambda g: (g.reshape(av.shape),))


def transpose(a, perm):
    perm = tuple(perm)
    out = np.transpose(value_of(a), perm)
    inv = tuple(np.argsort(perm))
    return _emit("transpose", (a,), out, lambda: lambda g: (np.transpose(g, inv),))


def slice_axis(a, axis: int, start: int, stop: int):
    av = value_of(a)
    axis %= av.ndim
    if not 0 <= start < stop <= av.shape[axis]:
        raise IndexError(f"slice [{start}, {stop}) out of range for axis of length {av.shape[axis]}")
    index = (slice(None),) * axis + (slice(start, stop),)
    out = av[index]

    def make_vjp():
        def vjp(g):
            full = np.zeros_like(av)
            full[index] = g
            return (full,)
        return vjp

    return _emit("slice", (a,), out, make_vjp)


def concat(items: Sequence, axis: int = 0):
    values = [value_of(x) for x in items]
    out = np.concatenate(values, axis=axis)

    def make_vjp():
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return lambda g: tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(items), out, make_vjp)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("add", (a, b), out,
                 lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("sub", (a, b), out,
                 lambda: lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("mul", (a, b), out,
                 lambda: lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def neg(a):
    return _emit("neg", (a,), -value_of(a), lambda: lambda g: (-g,))


def tanh(a):
    out = np.tanh(value_of(a))
    if "tanh" in _faults:
        return _emit("tanh", (a,), out, lambda: lambda g: (g * (1.0 - out),))
    return _emit("tanh", (a,), out, lambda: lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = tc.sigmoid(value_of(a))
    if "sigmoid" in _faults:
        return _emit("sigmoid", (a,), out, lambda: lambda g: (g * out,))
    return _emit("sigmoid", (a,), out, lambda: lambda g: (g * out * (1.0 - out),))


def sum_(a, axis=None):
    av = value_of(a)
    out = np.sum(av, axis=axis)

    def make_vjp():
        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, av.shape).copy(),)
        return vjp

    return _emit("sum", (a,), np.asarray(out), make_vjp)


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    out = np.mean(av, axis=axis)

    def make_vjp():
        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, av.shape).copy(),)
        return vjp

    return _emit("mean", (a,), np.asarray(out), make_vjp)


def l2_normalize(a, axis: int = -1):
    """Scale slices along ``axis`` to unit Euclidean norm."""
    av = value_of(a)
    norm = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise FloatingPointError("cannot normalize a zero-norm vector")
    out = av / norm

    def make_vjp():
        def vjp(g):
            proj = np.sum(g * out, axis=axis, keepdims=True)
            return ((g - out * proj) / norm,)
        return vjp

    return _emit("l2_normalize", (a,), out, make_vjp)


def logsumexp(a, axis: int = -1):
    av = value_of(a)
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def make_vjp():
        soft = e / s
        return lambda g: (np.expand_dims(g, axis) * soft,)

    return _emit("logsumexp", (a,), out, make_vjp)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    lv = value_of(logits)
    labels = np.asarray(labels)
    if lv.ndim != 2:
        raise ValueError("logits must be [batch, classes]")
    if labels.shape != (lv.shape[0],):
        raise ValueError("need one label per row of logits")
    k = lv.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(lv.shape[0])
    out = np.asarray(np.mean(logz - shifted[rows, labels]))

    def make_vjp():
        def vjp(g):
            p = np.exp(shifted - logz[:, None])
            p[rows, labels] -= 1.0
            return (g * p / lv.shape[0],)
        return vjp

    return _emit("softmax_cross_entropy", (logits,), out, make_vjp)


# ---------------------------------------------------------------------------
# finite-difference checking

def gradcheck(f: Callable[[dict], object], params: dict[str, np.ndarray], eps: float = 1e-5,
              max_coords: int = 200, seed: int = 0) -> float:
    """Largest relative error between backward() and central differences.

    ``f`` maps a dict of parameters to a scalar and must be written with the
    ops of this module. At most ``max_coords`` coordinates are sampled
    uniformly (without replacement) across all parameters.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    out = f(tape.watch(params))
    if not isinstance(out, Var) or out.value.size != 1:
        raise ValueError("f must return a scalar computed from the parameters")
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite function value")
    grads = tape.backward(out, np.ones_like(out.value))

    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for name, i in coords:
        base = params[name].reshape(-1)
        orig = base[i]
        base[i] = orig + eps
        fp = float(value_of(f(params)))
        base[i] = orig - eps
        fm = float(value_of(f(params)))
        base[i] = orig
        numeric = (fp - fm) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[i])
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite gradient at {name}[{i}]")
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
