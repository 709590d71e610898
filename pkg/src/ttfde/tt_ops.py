"""Linear operators in TT-matrix form and the 1D factor matrices they are built from."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tt_core import TTShapeError, TTVector, tt_add, tt_scale
from .tt_round import truncate


@dataclass(frozen=True)
class TTOperator:
    """Chain of order-4 cores ``A_k[a, i, j, b]`` (output index ``i``, input ``j``)."""

    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        cores = tuple(np.asarray(C, dtype=np.float64) for C in self.cores)
        if not cores:
            raise TTShapeError("operator needs at least one core")
        for k, C in enumerate(cores):
            if C.ndim != 4 or C.shape[1] != C.shape[2]:
                raise TTShapeError(f"operator core {k} has shape {C.shape}")
        for k in range(len(cores) - 1):
            if cores[k].shape[3] != cores[k + 1].shape[0]:
                raise TTShapeError(f"operator rank mismatch between cores {k} and {k + 1}")
        if cores[0].shape[0] != 1 or cores[-1].shape[3] != 1:
            raise TTShapeError("boundary operator ranks must be 1")
        object.__setattr__(self, "cores", cores)

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(C.shape[1] for C in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(C.shape[3] for C in self.cores)

    def __call__(self, f: TTVector) -> TTVector:
        return ttop_apply(self, f)


@dataclass
class KroneckerTerm:
    """``coefficient * (F_1 ⊗ ... ⊗ F_d)`` with identity on modes absent from ``factors``."""

    factors: Mapping[int, np.ndarray] = field(default_factory=dict)
    coefficient: float = 1.0


def fd_matrix(n: int, h: float, order: int, bc: str = "periodic") -> np.ndarray:
    """Second-order centered difference matrix for d/du (order 1) or d²/du² (order 2).

    ``outflow`` closes both ends by mirroring about the boundary node, which
    enforces a zero normal derivative: first-derivative rows vanish there and
    the second-derivative rows become ``2 (F_1 - F_0) / h²``.
    """
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if bc not in ("periodic", "outflow"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    D = np.zeros((n, n))
    idx = np.arange(n)
    if order == 1:
        lo, mid, hi = -0.5 / h, 0.0, 0.5 / h
    else:
        lo, mid, hi = 1.0 / h**2, -2.0 / h**2, 1.0 / h**2
    D[idx, idx] = mid
    D[idx[1:], idx[:-1]] = lo
    D[idx[:-1], idx[1:]] = hi
    if bc == "periodic":
        D[0, n - 1] = lo
        D[n - 1, 0] = hi
    else:
        # ghost F[-1] = F[1] and F[n] = F[n-2]
        D[0, 1] += lo
        D[n - 1, n - 2] += hi
    return D


def cumtrapz_matrix(n: int, h: float) -> np.ndarray:
    """Lower-triangular running trapezoid: ``(T v)[m] = ∫ v`` from node 0 to node m."""
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    T = np.tril(np.full((n, n), h))
    T[:, 0] = 0.5 * h
    T[np.arange(n), np.arange(n)] = 0.5 * h
    T[0, 0] = 0.0
    return T


def ttop_identity(mode_sizes: Sequence[int]) -> TTOperator:
    return TTOperator(tuple(np.eye(n).reshape(1, n, n, 1) for n in mode_sizes))


def ttop_rank1(mats: Sequence[np.ndarray], coefficient: float = 1.0) -> TTOperator:
    cores = [np.asarray(M, dtype=np.float64).reshape(1, *np.shape(M), 1) for M in mats]
    cores[0] = coefficient * cores[0]
    return TTOperator(tuple(cores))


def _as_vector(A: TTOperator) -> TTVector:
    return TTVector([C.reshape(C.shape[0], C.shape[1] * C.shape[2], C.shape[3]) for C in A.cores])


def _from_vector(v: TTVector, mode_sizes: Sequence[int]) -> TTOperator:
    return TTOperator(
        tuple(
            np.ascontiguousarray(C).reshape(C.shape[0], n, n, C.shape[2])
            for C, n in zip(v.cores, mode_sizes)
        )
    )


def ttop_add(A: TTOperator, B: TTOperator) -> TTOperator:
    if A.mode_sizes != B.mode_sizes:
        raise TTShapeError(f"operator sizes differ: {A.mode_sizes} vs {B.mode_sizes}")
    return _from_vector(tt_add(_as_vector(A), _as_vector(B)), A.mode_sizes)


def ttop_scale(A: TTOperator, a: float) -> TTOperator:
    return _from_vector(tt_scale(_as_vector(A), a), A.mode_sizes)


def ttop_round(A: TTOperator, rel_eps: float) -> TTOperator:
    """Truncate the operator, viewed as a TT vector over (i, j) pairs, relative to its norm."""
    if A.d < 2:
        return A
    v, _ = truncate(_as_vector(A), rel_eps, relative=True)
    return _from_vector(v, A.mode_sizes)


def ttop_from_terms(
    terms: Sequence[KroneckerTerm], mode_sizes: Sequence[int], round_eps: float = 1e-12
) -> TTOperator:
    """Fold separable terms into one operator by pairwise sums with rounding."""
    if not terms:
        raise ValueError("no terms to assemble")
    d = len(mode_sizes)
    ops = []
    for t in terms:
        mats = []
        for k in range(d):
            M = t.factors.get(k)
            if M is None:
                M = np.eye(mode_sizes[k])
            M = np.asarray(M, dtype=np.float64)
            if M.shape != (mode_sizes[k], mode_sizes[k]):
                raise TTShapeError(f"factor for mode {k} has shape {M.shape}")
            if not np.all(np.isfinite(M)):
                raise ValueError(f"factor for mode {k} has non-finite entries")
            mats.append(M)
        bad = set(t.factors) - set(range(d))
        if bad:
            raise TTShapeError(f"factor modes {sorted(bad)} out of range for d = {d}")
        ops.append(ttop_rank1(mats, t.coefficient))
    # balanced pairwise reduction keeps intermediate ranks small
    while len(ops) > 1:
        nxt = []
        for i in range(0, len(ops) - 1, 2):
            nxt.append(ttop_round(ttop_add(ops[i], ops[i + 1]), round_eps))
        if len(ops) % 2:
            nxt.append(ops[-1])
        ops = nxt
    return ops[0]


def ttop_apply(A: TTOperator, f: TTVector) -> TTVector:
    """Exact matrix-vector product; ranks multiply."""
    if A.mode_sizes != f.mode_sizes:
        raise TTShapeError(f"operator acts on {A.mode_sizes}, vector has {f.mode_sizes}")
    cores = []
    for Ak, Ck in zip(A.cores, f.cores):
        s0, n, _, s1 = Ak.shape
        r0, _, r1 = Ck.shape
        # A[a,i,j,b] C[r,j,q] -> W[a,r,i,b,q]
        W = np.tensordot(Ak, Ck, axes=([2], [1])).transpose(0, 3, 1, 2, 4)
        cores.append(W.reshape(s0 * r0, n, s1 * r1))
    return TTVector(cores)


def ttop_to_dense(A: TTOperator, cap: int = 10**8) -> np.ndarray:
    """Matricization with row/column multi-indices in row-major order."""
    N = int(np.prod(A.mode_sizes))
    if N * N > cap:
        raise MemoryError(f"dense operator would hold {N * N} entries")
    out = np.ones((1, 1, 1))
    for C in A.cores:
        s0, n, _, s1 = C.shape
        # out[I, J, a] C[a, i, j, b] -> out'[(I,i), (J,j), b]
        T = np.tensordot(out, C, axes=([2], [0]))  # I J i j b
        I, J = out.shape[:2]
        out = T.transpose(0, 2, 1, 3, 4).reshape(I * n, J * n, s1)
    return out[:, :, 0]


def terms_to_dense(terms: Sequence[KroneckerTerm], mode_sizes: Sequence[int]) -> np.ndarray:
    """Dense Kronecker-sum reference for small problems."""
    N = int(np.prod(mode_sizes))
    out = np.zeros((N, N))
    for t in terms:
        M = np.ones((1, 1))
        for k, n in enumerate(mode_sizes):
            M = np.kron(M, t.factors.get(k, np.eye(n)))
        out += t.coefficient * M
    return out
