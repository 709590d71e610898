"""Orthogonalization and rank truncation of TT vectors, plus the dense kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tt_core import TTVector, flatten_h, flatten_v, unflatten


class RankCapExceeded(RuntimeError):
    def __init__(self, ranks, cap):
        super().__init__(f"TT ranks {tuple(ranks)} exceed the cap {cap}")
        self.ranks = tuple(ranks)
        self.cap = cap


@dataclass(frozen=True)
class TruncationReport:
    input_ranks: tuple[int, ...]
    output_ranks: tuple[int, ...]
    requested_eps: float
    per_mode_eps: float
    discarded_norm_estimate: float


def _check_finite(A: np.ndarray) -> None:
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("matrix has non-finite entries")


def qr_dense(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR (LAPACK geqrf/orgqr)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or 0 in A.shape:
        raise ValueError(f"need a non-empty matrix, got shape {A.shape}")
    _check_finite(A)
    return np.linalg.qr(A, mode="reduced")


def lq_dense(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin LQ factorization ``A = L @ Q`` with orthonormal rows in ``Q``."""
    Q, R = qr_dense(np.asarray(A).T)
    return R.T, Q.T


def truncation_rank(s: np.ndarray, eps: float) -> int:
    """Smallest rank whose discarded tail has Frobenius norm <= eps (at least 1)."""
    # tail[k] = norm of s[k:]
    tail = np.sqrt(np.cumsum((s**2)[::-1]))[::-1]
    keep = int(np.count_nonzero(tail > eps))
    return max(keep, 1)


def svd_trunc_dense(A: np.ndarray, eps: float, max_rank: int | None = None):
    """Truncated SVD; returns ``(U, S, Vt, rank)`` with ``||A - U diag(S) Vt||_F <= eps``.

    With ``max_rank`` set, the rank is additionally clipped (the bound then no
    longer holds).
    """
    if eps < 0 or not np.isfinite(eps):
        raise ValueError(f"eps must be finite and non-negative, got {eps}")
    A = np.asarray(A, dtype=np.float64)
    _check_finite(A)
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails where the slower gesvd converges
        import scipy.linalg

        U, s, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
    r = truncation_rank(s, eps)
    if max_rank is not None:
        r = min(r, max_rank)
    return U[:, :r], s[:r], Vt[:r, :], r


def left_orthogonalize(f: TTVector) -> TTVector:
    cores = list(f.cores)
    for c in range(f.d - 1):
        Q, R = qr_dense(flatten_v(cores[c]))
        a, n, _ = cores[c].shape
        cores[c] = unflatten(Q, (a, n, Q.shape[1]))
        nxt = cores[c + 1]
        H = R @ flatten_h(nxt)
        cores[c + 1] = unflatten(H, (R.shape[0], nxt.shape[1], nxt.shape[2]))
    return TTVector(cores)


def right_orthogonalize(f: TTVector) -> TTVector:
    cores = list(f.cores)
    for c in range(f.d - 1, 0, -1):
        L, Q = lq_dense(flatten_h(cores[c]))
        _, n, b = cores[c].shape
        cores[c] = unflatten(Q, (Q.shape[0], n, b))
        prev = cores[c - 1]
        V = flatten_v(prev) @ L
        cores[c - 1] = unflatten(V, (prev.shape[0], prev.shape[1], L.shape[1]))
    return TTVector(cores)


def per_mode_eps(eps: float, d: int) -> float:
    return eps / np.sqrt(d - 1)


def truncate(
    f: TTVector, eps: float, max_rank: int | None = None, relative: bool = False
) -> tuple[TTVector, TruncationReport]:
    """Round ``f`` to ``g`` with ``||g - f||_F <= eps``.

    Left-orthogonalizes, then sweeps right to left with truncated SVDs of the
    horizontal flattenings. The result is right-orthogonal in cores 2..d and
    core 1 carries the norm. With ``relative=True`` the budget is
    ``eps * ||f||_F``.
    """
    if f.d < 2:
        raise ValueError("truncation needs at least two cores")
    if not np.isfinite(eps) or eps < 0:
        raise ValueError(f"eps must be finite and non-negative, got {eps}")
    cores = list(left_orthogonalize(f).cores)
    if relative:
        eps = eps * float(np.linalg.norm(cores[-1]))
    eps_hat = per_mode_eps(eps, f.d)
    discarded = 0.0
    for c in range(f.d - 1, 0, -1):
        C = cores[c]
        _, n, b = C.shape
        H = flatten_h(C)
        U, s, Vt, r = svd_trunc_dense(H, eps_hat, max_rank)
        full = np.linalg.norm(H)
        discarded += max(full**2 - float(s @ s), 0.0)
        cores[c] = unflatten(Vt, (r, n, b))
        prev = cores[c - 1]
        cores[c - 1] = unflatten(flatten_v(prev) @ (U * s), (prev.shape[0], prev.shape[1], r))
    g = TTVector(cores)
    report = TruncationReport(
        input_ranks=f.ranks,
        output_ranks=g.ranks,
        requested_eps=float(eps),
        per_mode_eps=float(eps_hat),
        discarded_norm_estimate=float(np.sqrt(discarded)),
    )
    return g, report


def round_tt(f: TTVector, eps: float, max_rank: int | None = None) -> TTVector:
    """``truncate`` without the report; single-core tensors pass through."""
    if f.d < 2:
        return f
    return truncate(f, eps, max_rank)[0]


def round_rel(f: TTVector, rel_eps: float, max_rank: int | None = None) -> TTVector:
    """Truncate relative to the norm of ``f``."""
    if f.d < 2:
        return f
    return truncate(f, rel_eps, max_rank, relative=True)[0]
