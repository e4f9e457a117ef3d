"""Tensor-train matrices.

A TT matrix of shape ``prod(row_dims) x prod(col_dims)`` is stored as cores
``G_k`` of shape ``[d_k, m_k, r_{k-1}, r_k]``. Entry ``(i, j)`` of the encoded
matrix, with ``i`` and ``j`` unflattened row-major into ``(i_1..i_n)`` and
``(j_1..j_n)``, is the matrix product ``G_1[i_1, j_1] @ ... @ G_n[i_n, j_n]``.

Cores may be plain arrays or autograd ``Var`` values; :func:`tt_matvec` is
written with autograd ops so it can be differentiated.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .tensor_core import ShapeError, contraction_cost

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TTMatrix:
    cores: tuple

    def __post_init__(self):
        cores = tuple(self.cores)
        object.__setattr__(self, "cores", cores)
        if not cores:
            raise ShapeError("a TT matrix needs at least one core")
        for k, core in enumerate(cores):
            if len(core.shape) != 4 or min(core.shape) < 1:
                raise ShapeError(f"core {k} must be 4-d with positive dims, got {core.shape}")
        if cores[0].shape[2] != 1 or cores[-1].shape[3] != 1:
            raise ShapeError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[3] != cores[k + 1].shape[2]:
                raise ShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{cores[k].shape[3]} != {cores[k + 1].shape[2]}")

    @property
    def n(self) -> int:
        return len(self.cores)

    @property
    def row_dims(self) -> list[int]:
        return [c.shape[0] for c in self.cores]

    @property
    def col_dims(self) -> list[int]:
        return [c.shape[1] for c in self.cores]

    @property
    def ranks(self) -> list[int]:
        return [1] + [c.shape[3] for c in self.cores]

    @property
    def shape(self) -> tuple[int, int]:
        return math.prod(self.row_dims), math.prod(self.col_dims)

    @property
    def num_params(self) -> int:
        return sum(math.prod(c.shape) for c in self.cores)

    def values(self) -> "TTMatrix":
        """Return a copy whose cores are plain arrays."""
        return TTMatrix(tuple(np.asarray(ag.value_of(c)) for c in self.cores))

    # serialization ---------------------------------------------------------
    def to_record(self) -> dict:
        cores = [np.asarray(ag.value_of(c), dtype="<f8") for c in self.cores]
        return {
            "version": FORMAT_VERSION,
            "n": self.n,
            "row_dims": self.row_dims,
            "col_dims": self.col_dims,
            "ranks": self.ranks,
            "byte_order": "little",
            "cores": [c.reshape(-1).tolist() for c in cores],
        }

    @classmethod
    def from_record(cls, record: dict) -> "TTMatrix":
        if record.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported TT record version {record.get('version')}")
        rd, cd, rk = record["row_dims"], record["col_dims"], record["ranks"]
        cores = []
        for k in range(record["n"]):
            shape = (rd[k], cd[k], rk[k], rk[k + 1])
            cores.append(np.asarray(record["cores"][k], dtype=np.float64).reshape(shape))
        return cls(tuple(cores))

    def to_bytes(self) -> bytes:
        header = {k: v for k, v in self.to_record().items() if k != "cores"}
        head = json.dumps(header, sort_keys=True).encode()
        body = b"".join(np.asarray(ag.value_of(c), dtype="<f8").tobytes() for c in self.cores)
        return struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TTMatrix":
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4:4 + hlen])
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported TT record version {header.get('version')}")
        rd, cd, rk = header["row_dims"], header["col_dims"], header["ranks"]
        offset, cores = 4 + hlen, []
        for k in range(header["n"]):
            shape = (rd[k], cd[k], rk[k], rk[k + 1])
            size = math.prod(shape)
            if offset + 8 * size > len(blob):
                raise ValueError("truncated TT record")
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            cores.append(arr.astype(np.float64).reshape(shape))
            offset += 8 * size
        return cls(tuple(cores))


def balanced_factorization(N: int, n: int) -> list[int]:
    """Split ``N`` into ``n`` ascending factors with the smallest possible maximum.

    Ties are broken by the lexicographically smallest factor list; factors of 1
    pad when ``N`` has too few prime factors.
    """
    if N < 1 or n < 1:
        raise ValueError("N and n must be positive")
    best = None

    def search(remaining, slots, lo, prefix):
        nonlocal best
        if slots == 1:
            if remaining >= lo:
                cand = prefix + [remaining]
                key = (max(cand), cand)
                if best is None or key < best:
                    best = key
            return
        f = lo
        while f ** slots <= remaining:
            if remaining % f == 0:
                search(remaining // f, slots - 1, f, prefix + [f])
            f += 1

    search(N, n, 1, [])
    return best[1]


def tt_to_dense(ttm: TTMatrix) -> np.ndarray:
    """Materialize the full ``D x M`` matrix (small matrices and tests only)."""
    _check_dense_allowed(ttm)
    cores = [np.asarray(ag.value_of(c)) for c in ttm.cores]
    # acc: [D_prev, M_prev, r]
    acc = np.ones((1, 1, 1))
    for core in cores:
        d, m, rp, rn = core.shape
        step = np.einsum("abr,ijrs->aibjs", acc, core)
        acc = step.reshape(acc.shape[0] * d, acc.shape[1] * m, rn)
    return acc[:, :, 0]


def _check_dense_allowed(ttm):
    if ag.guard_active():
        raise ag.AllocationError(f"dense reconstruction of a {ttm.shape} TT matrix inside an allocation guard")


def tt_matvec(ttm: TTMatrix, x):
    """Compute ``x @ W.T`` for a batch ``x`` of shape ``[batch, M]``.

    Cores are contracted strictly left to right while carrying a
    ``[batch, rows_done, rank, cols_left]`` intermediate, so the dense matrix
    is never formed.
    """
    xv = ag.value_of(x)
    D, M = ttm.shape
    if xv.ndim != 2 or xv.shape[1] != M:
        raise ShapeError(f"expected input [batch, {M}], got {xv.shape}")
    B = xv.shape[0]
    z = ag.reshape(x, (B, 1, 1, M))
    rows_done, cols_left = 1, M
    for core in ttm.cores:
        d, m, rp, rn = core.shape
        cols_left //= m
        z = ag.reshape(z, (B, rows_done, rp, m, cols_left))
        # -> [B, rows_done, cols_left, d, rn]
        z = ag.contract(z, core, [2, 3], [2, 1])
        z = ag.transpose(z, (0, 1, 3, 4, 2))
        rows_done *= d
        z = ag.reshape(z, (B, rows_done, rn, cols_left))
    return ag.reshape(z, (B, D))


def flop_count_matvec(ttm: TTMatrix, batch: int = 1) -> int:
    """Multiply-adds performed by :func:`tt_matvec` for a batch of inputs."""
    _, M = ttm.shape
    total, rows_done, cols_left = 0, 1, M
    for core in ttm.cores:
        d, m, rp, rn = core.shape
        cols_left //= m
        total += contraction_cost((batch, rows_done, rp, m, cols_left), (d, m, rp, rn), [2, 3], [2, 1])
        rows_done *= d
    return total


def _truncation_rank(s: np.ndarray, cap: int | None, tol: float, shape) -> int:
    # singular values at round-off level count as zero even when tol == 0
    floor = max(tol, np.finfo(np.float64).eps * max(shape))
    keep = int(np.sum(s > floor * s[0])) if s[0] > 0 else 1
    keep = max(keep, 1)
    if cap is not None:
        keep = min(keep, cap)
    return keep


def tt_svd(w, row_dims: Sequence[int], col_dims: Sequence[int],
           max_ranks: Sequence[int | None] | int | None = None, svd_tol: float = 0.0) -> TTMatrix:
    """Factor a dense matrix into TT cores by sequential truncated SVDs."""
    w = np.asarray(w, dtype=np.float64)
    row_dims, col_dims = list(row_dims), list(col_dims)
    n = len(row_dims)
    if len(col_dims) != n:
        raise ShapeError("row_dims and col_dims need the same length")
    if w.shape != (math.prod(row_dims), math.prod(col_dims)):
        raise ShapeError(f"matrix shape {w.shape} does not match dims {row_dims} x {col_dims}")
    if not np.all(np.isfinite(w)):
        raise ValueError("input contains non-finite values")
    if max_ranks is None or isinstance(max_ranks, int):
        max_ranks = [max_ranks] * (n - 1)
    if len(max_ranks) != n - 1:
        raise ValueError(f"need {n - 1} rank caps, got {len(max_ranks)}")

    # interleave to [d_1, m_1, d_2, m_2, ...]
    t = w.reshape(row_dims + col_dims)
    t = t.transpose([a for k in range(n) for a in (k, n + k)])
    cores, r_prev = [], 1
    rest = t.reshape(1, -1)
    for k in range(n - 1):
        dk, mk = row_dims[k], col_dims[k]
        mat = rest.reshape(r_prev * dk * mk, -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = _truncation_rank(s, max_ranks[k], svd_tol, mat.shape)
        core = u[:, :r].reshape(r_prev, dk, mk, r).transpose(1, 2, 0, 3)
        cores.append(np.ascontiguousarray(core))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    last = rest.reshape(r_prev, row_dims[-1], col_dims[-1], 1).transpose(1, 2, 0, 3)
    cores.append(np.ascontiguousarray(last))
    return TTMatrix(tuple(cores))


def init_tt(row_dims: Sequence[int], col_dims: Sequence[int], ranks: Sequence[int],
            seed=None, target_std: float = 1.0) -> TTMatrix:
    """Gaussian cores scaled so the encoded matrix has entry std ``target_std``.

    ``ranks`` lists all ``n + 1`` bond dimensions including the boundary ones.
    Each entry of the global matrix sums ``prod(ranks)`` products of ``n``
    independent core entries, so the per-core std is
    ``(target_std**2 / prod(ranks)) ** (1 / (2n))``.
    """
    n = len(row_dims)
    ranks = list(ranks)
    if len(col_dims) != n or len(ranks) != n + 1:
        raise ShapeError("inconsistent dims/ranks")
    if ranks[0] != 1 or ranks[-1] != 1:
        raise ShapeError("boundary ranks must be 1")
    if target_std <= 0:
        raise ValueError("target_std must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = (target_std ** 2 / math.prod(ranks)) ** (1.0 / (2 * n))
    cores = tuple(
        sigma * rng.standard_normal((row_dims[k], col_dims[k], ranks[k], ranks[k + 1]))
        for k in range(n)
    )
    return TTMatrix(cores)


# ---------------------------------------------------------------------------
# gate-stacked TT matrices

def is_gate_stacked(ttm: TTMatrix, g: int) -> bool:
    c0 = ttm.cores[0].shape
    return ttm.n >= 2 and c0[0] == g and c0[1] == 1 and c0[2] == 1


def gate_mixing_matrix(stack: TTMatrix) -> np.ndarray:
    """The ``g x r0`` matrix obtained by squeezing the leading gate core."""
    core0 = np.asarray(ag.value_of(stack.cores[0]))
    if core0.shape[1] != 1 or core0.shape[2] != 1:
        raise ShapeError("leading core is not a gate core")
    return core0[:, 0, 0, :]


def init_gate_stacked(g: int, row_dims, col_dims, ranks, seed=None, target_std: float = 1.0) -> TTMatrix:
    """Random gate-stacked TT matrix with leading core ``[g, 1, 1, r0]``.

    ``ranks`` is ``[r0, r1, ..., r_n]`` with ``r_n == 1``.
    """
    return init_tt([g] + list(row_dims), [1] + list(col_dims), [1] + list(ranks), seed, target_std)


# ---------------------------------------------------------------------------
# parameter accounting

def param_count_dense(g: int, D: int, M: int) -> int:
    return g * D * (M + D)


def param_count_separate(g: int, row_dims, col_dims, ranks) -> int:
    """Weights of ``2g`` independent TT matrices (input and hidden side).

    ``ranks`` is ``[r_0, ..., r_n]``; hidden-side matrices reuse ``row_dims``
    as their column factorization.
    """
    return g * sum(ranks[k] * ranks[k + 1] * d * (m + d)
                   for k, (d, m) in enumerate(zip(row_dims, col_dims)))


def param_count_fused(g: int, r0: int, row_dims, col_dims, ranks) -> int:
    """Closed-form fused count with one ``g * r0`` gate term.

    ``ranks`` is ``[r_0, ..., r_n]`` where ``r_0`` equals ``r0``. Concrete
    fused cells hold two gate cores; see :func:`fused_actual_count`.
    """
    if ranks[0] != r0:
        raise ValueError("ranks[0] must equal r0")
    return g * r0 + sum(ranks[k] * ranks[k + 1] * d * (m + d)
                        for k, (d, m) in enumerate(zip(row_dims, col_dims)))


def fused_actual_count(g: int, r0: int, row_dims, col_dims, ranks) -> int:
    """Weight count of a fused cell, which stores a gate core per stack."""
    return param_count_fused(g, r0, row_dims, col_dims, ranks) + g * r0
