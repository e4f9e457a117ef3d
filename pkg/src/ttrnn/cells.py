"""LSTM and GRU cells in dense, per-gate TT and fused (gate-stacked) TT form.

Gate order is fixed: LSTM ``(c, u, f, o)`` and GRU ``(h, u, r)``. Stacked
weight matrices hold gate ``i`` in rows ``[i*D, (i+1)*D)``.

Bias convention: the LSTM carries one bias vector per gate (``b``), the GRU
carries an input-side and a hidden-side bias per gate (``b_w``, ``b_u``).

All step functions take batched inputs ``x: [batch, M]`` and hidden states
``h: [batch, D]``, and work on plain arrays or autograd values alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .tensor_core import ShapeError
from .tt_format import TTMatrix, balanced_factorization, flop_count_matvec, init_tt, tt_matvec

GATES = {"lstm": ("c", "u", "f", "o"), "gru": ("h", "u", "r")}
FORMS = ("dense", "tt-sep", "tt-fused")


class CellState(NamedTuple):
    h: object
    c: object = None


def gate_count(kind: str) -> int:
    try:
        return len(GATES[kind])
    except KeyError:
        raise ValueError(f"unknown cell kind {kind!r}") from None


def gate_slice(y, g: int, i: int):
    """Rows of gate ``i`` from a stacked pre-activation ``y: [..., g*D]``."""
    if not 0 <= i < g:
        raise IndexError(f"gate index {i} out of range for {g} gates")
    total = ag.value_of(y).shape[-1]
    if total % g:
        raise ShapeError(f"stacked length {total} is not divisible by {g}")
    D = total // g
    return ag.slice_axis(y, -1, i * D, (i + 1) * D)


@dataclass
class CellParams:
    """Weights and biases of one recurrent cell.

    ``tensors`` maps local names to arrays (or autograd values while taped).
    Subclasses decide how those tensors form the input-side and hidden-side
    linear maps.
    """

    kind: str
    input_size: int
    hidden_size: int
    tensors: dict = field(default_factory=dict)

    form = "abstract"

    @property
    def g(self) -> int:
        return gate_count(self.kind)

    def with_tensors(self, tensors: dict) -> "CellParams":
        return replace(self, tensors=dict(tensors))

    def meta(self) -> dict:
        return {"kind": self.kind, "form": self.form, "input_size": self.input_size,
                "hidden_size": self.hidden_size, "gate_order": list(GATES[self.kind])}

    def num_weights(self) -> int:
        return sum(int(np.size(ag.value_of(v))) for k, v in self.tensors.items() if not k.startswith("b"))

    def num_biases(self) -> int:
        return sum(int(np.size(ag.value_of(v))) for k, v in self.tensors.items() if k.startswith("b"))

    # -- linear maps, overridden per form --------------------------------
    def input_all(self, x) -> list:
        """Input-side pre-activations, one ``[batch, D]`` block per gate."""
        raise NotImplementedError

    def hidden_gates(self, h, gates) -> list:
        """Hidden-side contributions ``U_i h`` for the requested gate indices."""
        raise NotImplementedError

    def flops_per_step(self, batch: int = 1) -> int:
        raise NotImplementedError

    # -- biases ------------------------------------------------------------
    def bias(self, side: str, i: int):
        D = self.hidden_size
        if self.kind == "lstm":
            if side == "u":
                return None
            b = self.tensors["b"]
        else:
            b = self.tensors["b_w" if side == "w" else "b_u"]
        return ag.slice_axis(b, 0, i * D, (i + 1) * D)


def _zero_biases(kind: str, D: int) -> dict:
    g = gate_count(kind)
    if kind == "lstm":
        return {"b": np.zeros(g * D)}
    return {"b_w": np.zeros(g * D), "b_u": np.zeros(g * D)}


# ---------------------------------------------------------------------------
# dense

@dataclass
class DenseCellParams(CellParams):
    form = "dense"

    @property
    def W(self):
        return self.tensors["W"]

    @property
    def U(self):
        return self.tensors["U"]

    def input_all(self, x):
        y = ag.contract(x, self.W, [1], [1])
        return [gate_slice(y, self.g, i) for i in range(self.g)]

    def hidden_gates(self, h, gates):
        D = self.hidden_size
        gates = list(gates)
        if gates == list(range(gates[0], gates[-1] + 1)):
            rows = ag.slice_axis(self.U, 0, gates[0] * D, (gates[-1] + 1) * D)
            y = ag.contract(h, rows, [1], [1])
            return [gate_slice(y, len(gates), k) for k in range(len(gates))]
        return [ag.contract(h, ag.slice_axis(self.U, 0, i * D, (i + 1) * D), [1], [1]) for i in gates]

    def flops_per_step(self, batch=1):
        g, D, M = self.g, self.hidden_size, self.input_size
        return batch * g * D * (M + D)


# ---------------------------------------------------------------------------
# per-gate TT

@dataclass
class SeparateTTCellParams(CellParams):
    """One TT matrix per gate and side; tensors named ``W.<gate>.<k>``."""

    form = "tt-sep"
    n_cores: int = 2

    def meta(self):
        return {**super().meta(), "n_cores": self.n_cores}

    def tt(self, side: str, i: int) -> TTMatrix:
        e = GATES[self.kind][i]
        return TTMatrix(tuple(self.tensors[f"{side}.{e}.{k}"] for k in range(self.n_cores)))

    def input_all(self, x):
        return [tt_matvec(self.tt("W", i), x) for i in range(self.g)]

    def hidden_gates(self, h, gates):
        return [tt_matvec(self.tt("U", i), h) for i in gates]

    def flops_per_step(self, batch=1):
        return sum(flop_count_matvec(self.tt(s, i), batch) for s in "WU" for i in range(self.g))


# ---------------------------------------------------------------------------
# fused (gate-stacked) TT

def substack(stack: TTMatrix, start: int, stop: int) -> TTMatrix:
    """Restrict a gate-stacked TT matrix to gates ``start..stop-1``.

    Only the leading gate core is sliced; the shared cores are reused.
    """
    core0 = ag.slice_axis(stack.cores[0], 0, start, stop)
    return TTMatrix((core0,) + tuple(stack.cores[1:]))


@dataclass
class FusedTTCellParams(CellParams):
    """Gate-stacked TT matrices ``W`` (gD x M) and ``U`` (gD x D).

    Tensors are named ``W.<k>`` / ``U.<k>`` with ``k = 0`` the gate core of
    shape ``[g, 1, 1, r0]``.
    """

    form = "tt-fused"
    n_cores: int = 2

    def meta(self):
        return {**super().meta(), "n_cores": self.n_cores}

    def stack(self, side: str) -> TTMatrix:
        return TTMatrix(tuple(self.tensors[f"{side}.{k}"] for k in range(self.n_cores + 1)))

    @property
    def W(self) -> TTMatrix:
        return self.stack("W")

    @property
    def U(self) -> TTMatrix:
        return self.stack("U")

    def input_all(self, x):
        y = tt_matvec(self.W, x)
        return [gate_slice(y, self.g, i) for i in range(self.g)]

    def hidden_gates(self, h, gates):
        gates = list(gates)
        if gates == list(range(self.g)):
            y = tt_matvec(self.U, h)
            return [gate_slice(y, self.g, i) for i in gates]
        if gates == list(range(gates[0], gates[-1] + 1)):
            y = tt_matvec(substack(self.U, gates[0], gates[-1] + 1), h)
            return [gate_slice(y, len(gates), k) for k in range(len(gates))]
        return [tt_matvec(substack(self.U, i, i + 1), h) for i in gates]

    def flops_per_step(self, batch=1):
        total = flop_count_matvec(self.W, batch)
        if self.kind == "lstm":
            return total + flop_count_matvec(self.U, batch)
        return (total + flop_count_matvec(substack(self.U.values(), 1, 3), batch)
                + flop_count_matvec(substack(self.U.values(), 0, 1), batch))


# ---------------------------------------------------------------------------
# steps

def _check_inputs(params: CellParams, x, h):
    xs, hs = ag.value_of(x).shape, ag.value_of(h).shape
    if len(xs) != 2 or xs[1] != params.input_size:
        raise ShapeError(f"expected x of shape [batch, {params.input_size}], got {xs}")
    if len(hs) != 2 or hs != (xs[0], params.hidden_size):
        raise ShapeError(f"expected h of shape [{xs[0]}, {params.hidden_size}], got {hs}")
    if not np.all(np.isfinite(ag.value_of(h))):
        raise FloatingPointError("non-finite recurrent state")


def lstm_step(params: CellParams, x, state: CellState) -> CellState:
    """One LSTM update; works for every parameter form."""
    if params.kind != "lstm":
        raise ValueError("lstm_step needs LSTM parameters")
    h, c = state.h, state.c
    _check_inputs(params, x, h)
    wx = params.input_all(x)
    uh = params.hidden_gates(h, range(4))
    pre = [wx[i] + uh[i] + params.bias("w", i) for i in range(4)]
    c_tilde = ag.tanh(pre[0])
    u, f, o = (ag.sigmoid(p) for p in pre[1:])
    c_new = u * c_tilde + f * c
    h_new = o * ag.tanh(c_new)
    return CellState(h_new, c_new)


def gru_step(params: CellParams, x, state) -> CellState:
    """One GRU update; the reset gate scales ``h`` before the candidate's hidden map."""
    if params.kind != "gru":
        raise ValueError("gru_step needs GRU parameters")
    h = state.h if isinstance(state, CellState) else state
    _check_inputs(params, x, h)
    wx = params.input_all(x)
    uh_u, uh_r = params.hidden_gates(h, [1, 2])
    u = ag.sigmoid(wx[1] + params.bias("w", 1) + uh_u + params.bias("u", 1))
    r = ag.sigmoid(wx[2] + params.bias("w", 2) + uh_r + params.bias("u", 2))
    (uh_h,) = params.hidden_gates(r * h, [0])
    h_tilde = ag.tanh(wx[0] + params.bias("w", 0) + uh_h + params.bias("u", 0))
    return CellState(u * h_tilde + (1.0 - u) * h)


# the TT variants share the dense step semantics; only the linear maps differ
def tt_cell_step_separate(params: SeparateTTCellParams, x, state):
    return cell_step(params, x, state)


def tt_cell_step_fused(params: FusedTTCellParams, x, state):
    return cell_step(params, x, state)


def cell_step(params: CellParams, x, state) -> CellState:
    if params.kind == "lstm":
        return lstm_step(params, x, state)
    return gru_step(params, x, state)


def zero_state(params: CellParams, batch: int) -> CellState:
    h = np.zeros((batch, params.hidden_size))
    if params.kind == "lstm":
        return CellState(h, np.zeros_like(h))
    return CellState(h)


def run_sequence(params: CellParams, inputs, init_state: CellState | None = None):
    """Unroll the cell over ``inputs: [T, batch, M]``.

    Returns the list of hidden states ``h_1..h_T`` and the final state.
    """
    seq = ag.value_of(inputs)
    if seq.ndim != 3 or seq.shape[0] < 1:
        raise ShapeError(f"expected inputs [T, batch, M] with T >= 1, got {seq.shape}")
    state = init_state if init_state is not None else zero_state(params, seq.shape[1])
    hs = []
    for t in range(seq.shape[0]):
        x_t = inputs[t] if not isinstance(inputs, ag.Var) else ag.reshape(
            ag.slice_axis(inputs, 0, t, t + 1), seq.shape[1:])
        state = cell_step(params, x_t, state)
        hs.append(state.h)
    return hs, state


# ---------------------------------------------------------------------------
# weight sharing view

def rank_family(stack: TTMatrix) -> np.ndarray:
    """The ``r0`` matrices ``M_alpha`` encoded by the cores after the gate core.

    Returns an array of shape ``[r0, D, M]``.
    """
    cores = [np.asarray(ag.value_of(c)) for c in stack.cores[1:]]
    r0 = cores[0].shape[2]
    acc = np.eye(r0).reshape(r0, 1, 1, r0)  # [alpha, D_prev, M_prev, r]
    for core in cores:
        d, m, _, rn = core.shape
        acc = np.einsum("aijr,kmrs->aikjms", acc, core)
        acc = acc.reshape(r0, acc.shape[1] * d, acc.shape[3] * m, rn)
    return acc[..., 0]


def gate_matrix_mixture(stack: TTMatrix, i: int) -> np.ndarray:
    """Gate ``i``'s weight matrix as the mixture ``sum_a V[i, a] M_a``."""
    core0 = np.asarray(ag.value_of(stack.cores[0]))
    if core0.shape[1] != 1 or core0.shape[2] != 1:
        raise ShapeError("stack has no gate core")
    if not 0 <= i < core0.shape[0]:
        raise IndexError(f"gate index {i} out of range")
    V = core0[:, 0, 0, :]
    return np.tensordot(V[i], rank_family(stack), axes=1)


def fused_to_dense(params: FusedTTCellParams) -> DenseCellParams:
    """Dense cell whose gate blocks are the weight-sharing mixtures."""
    W = np.concatenate([gate_matrix_mixture(params.W.values(), i) for i in range(params.g)])
    U = np.concatenate([gate_matrix_mixture(params.U.values(), i) for i in range(params.g)])
    tensors = {k: np.array(ag.value_of(v)) for k, v in params.tensors.items() if k.startswith("b")}
    return DenseCellParams(params.kind, params.input_size, params.hidden_size,
                           {"W": W, "U": U, **tensors})


# ---------------------------------------------------------------------------
# construction

def init_cell(kind: str, form: str, input_size: int, hidden_size: int, *, n_cores: int = 2,
              rank: int = 2, rank0: int | None = None, seed=0, row_dims=None, col_dims=None,
              forget_bias: float = 0.0) -> CellParams:
    """Randomly initialized cell parameters.

    Weight matrices target an entry std of ``1/sqrt(fan_in)``. ``row_dims``
    and ``col_dims`` override the balanced factorizations of the hidden and
    input sizes.
    """
    g = gate_count(kind)
    D, M = hidden_size, input_size
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = _zero_biases(kind, D)
    if kind == "lstm" and forget_bias:
        tensors["b"][2 * D:3 * D] = forget_bias
    if form == "dense":
        tensors["W"] = rng.standard_normal((g * D, M)) / math.sqrt(M)
        tensors["U"] = rng.standard_normal((g * D, D)) / math.sqrt(D)
        return DenseCellParams(kind, M, D, tensors)

    dd = list(row_dims) if row_dims is not None else balanced_factorization(D, n_cores)
    md = list(col_dims) if col_dims is not None else balanced_factorization(M, n_cores)
    if len(dd) != n_cores or len(md) != n_cores or math.prod(dd) != D or math.prod(md) != M:
        raise ShapeError(f"factorizations {dd} x {md} do not match {D} x {M} with {n_cores} cores")
    inner = [rank] * (n_cores - 1)
    if form == "tt-sep":
        for e in GATES[kind]:
            for side, cols, fan in (("W", md, M), ("U", dd, D)):
                tt = init_tt(dd, cols, [1] + inner + [1], rng, 1.0 / math.sqrt(fan))
                for k, core in enumerate(tt.cores):
                    tensors[f"{side}.{e}.{k}"] = core
        return SeparateTTCellParams(kind, M, D, tensors, n_cores=n_cores)
    if form == "tt-fused":
        r0 = rank if rank0 is None else rank0
        for side, cols, fan in (("W", md, M), ("U", dd, D)):
            tt = init_tt([g] + dd, [1] + cols, [1, r0] + inner + [1], rng, 1.0 / math.sqrt(fan))
            for k, core in enumerate(tt.cores):
                tensors[f"{side}.{k}"] = core
        return FusedTTCellParams(kind, M, D, tensors, n_cores=n_cores)
    raise ValueError(f"unknown parameter form {form!r}; expected one of {FORMS}")


_CLASSES = {"dense": DenseCellParams, "tt-sep": SeparateTTCellParams, "tt-fused": FusedTTCellParams}


def cell_from_meta(meta: dict, tensors: dict) -> CellParams:
    cls = _CLASSES[meta["form"]]
    if list(meta.get("gate_order", GATES[meta["kind"]])) != list(GATES[meta["kind"]]):
        raise ValueError(f"gate order {meta.get('gate_order')} does not match {GATES[meta['kind']]}")
    extra = {"n_cores": meta["n_cores"]} if "n_cores" in meta else {}
    return cls(meta["kind"], meta["input_size"], meta["hidden_size"], dict(tensors), **extra)
