"""CDF equation for the nodal values of the random Burgers equation with reaction.

The solution ``u`` of ``u_t + u u_x = gamma u_xx + alpha sin(pi u)`` is sampled at
``N`` periodic nodes ``x_j = 2 pi (j - 1) / N``. The joint CDF ``F(u_1..u_N, t)``
of those nodal values obeys a linear transport equation on the phase-space
box ``[lo, hi]**N``, which is assembled here as a TT operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import erf

from .tt_core import TTVector, tt_rank1, tt_to_dense
from .tt_ops import (
    KroneckerTerm,
    TTOperator,
    cumtrapz_matrix,
    fd_matrix,
    ttop_from_terms,
)


@dataclass(frozen=True)
class GridSpec:
    N: int
    points_per_dim: int = 64
    lo: float = -1.3
    hi: float = 1.3

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.points_per_dim < 8:
            raise ValueError("need at least 8 points per dimension")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.points_per_dim - 1)

    @property
    def u(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points_per_dim)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return (self.points_per_dim,) * self.N


@dataclass(frozen=True)
class BurgersParams:
    gamma: float = 0.1
    alpha: float = 0.5
    sigma_ic: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.sigma_ic > 0:
            raise ValueError("sigma_ic must be positive")

    def reaction(self, u):
        return self.alpha * np.sin(np.pi * np.asarray(u))


def x_points(N: int) -> np.ndarray:
    return 2 * np.pi * np.arange(N) / N


def physical_diff_matrices(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Periodic second-order differences on the ``N`` physical nodes.

    For ``N <= 2`` the neighbours coincide, so ``D1`` vanishes identically.
    """
    dx = 2 * np.pi / N
    I = np.eye(N)
    nxt = np.roll(I, 1, axis=1)  # picks u_{j+1}
    prv = np.roll(I, -1, axis=1)  # picks u_{j-1}
    D1 = (nxt - prv) / (2 * dx)
    D2 = (nxt - 2 * I + prv) / dx**2
    return D1, D2


def cdf_terms(grid: GridSpec, params: BurgersParams) -> list[KroneckerTerm]:
    """Separable terms of the CDF right-hand side.

    With characteristic speeds ``a_i(u) = -u_i (D1 u)_i + gamma (D2 u)_i + R(u_i)``
    the CDF obeys

        F_t = -sum_i [sum_j c_ij(u_i) u_j + R(u_i)] dF/du_i
              + sum_{i != j} c_ij(u_i) int_lo^{u_j} dF/du_i du_j,

    where ``c_ij(u_i) = -u_i D1_ij + gamma D2_ij``. The reaction appears once.
    """
    N = grid.N
    u = grid.u
    D1, D2 = physical_diff_matrices(N)
    Dp = fd_matrix(grid.points_per_dim, grid.h, 1, "outflow")
    T = cumtrapz_matrix(grid.points_per_dim, grid.h)
    U = np.diag(u)
    g = params.gamma
    terms: list[KroneckerTerm] = []
    for i in range(N):
        # terms depending on u_i alone
        diag = D1[i, i] * u**2 - g * D2[i, i] * u - params.reaction(u)
        if np.any(diag != 0):
            terms.append(KroneckerTerm({i: np.diag(diag) @ Dp}))
        for j in range(N):
            if j == i:
                continue
            if D1[i, j] != 0:
                # u_i D1_ij u_j dF/du_i
                terms.append(KroneckerTerm({i: D1[i, j] * U @ Dp, j: U}))
            if D2[i, j] != 0:
                # -gamma D2_ij u_j dF/du_i
                terms.append(KroneckerTerm({i: Dp, j: U}, -g * D2[i, j]))
            if D1[i, j] != 0 or D2[i, j] != 0:
                # -(D1_ij u_i - gamma D2_ij) int dF/du_i du_j
                c = D1[i, j] * u - g * D2[i, j]
                terms.append(KroneckerTerm({i: np.diag(c) @ Dp, j: T}, -1.0))
    return terms


def diffusion_terms(grid: GridSpec, nu: float) -> list[KroneckerTerm]:
    """``nu * sum_j d²/du_j²`` with the outflow closure."""
    D2p = fd_matrix(grid.points_per_dim, grid.h, 2, "outflow")
    return [KroneckerTerm({j: D2p}, nu) for j in range(grid.N)]


def assemble_cdf_operator(
    grid: GridSpec,
    params: BurgersParams,
    numerical_diffusion: float = 0.0,
    round_eps: float = 1e-12,
    max_rank: int | None = None,
) -> TTOperator:
    terms = cdf_terms(grid, params)
    if numerical_diffusion:
        terms += diffusion_terms(grid, numerical_diffusion)
    if not terms:
        # gamma = alpha = 0 at N = 1: the right-hand side vanishes
        terms = [KroneckerTerm({0: np.zeros((grid.points_per_dim,) * 2)})]
    op = ttop_from_terms(terms, grid.mode_sizes, round_eps)
    if max_rank is not None and max(op.ranks) > max_rank:
        raise RuntimeError(f"assembled operator ranks {op.ranks} exceed cap {max_rank}")
    return op


def gaussian_cdf(u, sigma: float):
    return 0.5 * (1.0 + erf(np.asarray(u) / (sigma * np.sqrt(2.0))))


def gaussian_cdf_ic(grid: GridSpec, params: BurgersParams) -> TTVector:
    g = gaussian_cdf(grid.u, params.sigma_ic)
    return tt_rank1([g] * grid.N)


def _slice_others(F: TTVector, keep: list[int]):
    """Evaluate every non-kept variable at its top grid index and absorb it."""
    if any(k < 0 or k >= F.d for k in keep):
        raise IndexError(f"keep {keep} out of range for d = {F.d}")
    cores: list[np.ndarray] = []
    pending = np.ones((1, 1))
    for k, C in enumerate(F.cores):
        if k in keep:
            if pending is not None:
                C = np.tensordot(pending, C, axes=(1, 0))
                pending = None
            cores.append(np.asarray(C))
        else:
            S = C[:, -1, :]
            if cores:
                cores[-1] = np.tensordot(cores[-1], S, axes=(2, 0))
            else:
                pending = pending @ S
    if not cores:
        return float(pending[0, 0])
    return TTVector(cores)


def marginal_cdf(F: TTVector, keep: Iterable[int]) -> np.ndarray:
    """Marginal CDF over ``keep``: every other variable is evaluated at ``hi``."""
    sub = _slice_others(F, sorted(set(keep)))
    if isinstance(sub, float):
        return np.array(sub)
    return tt_to_dense(sub)


def pdf_from_cdf(F: TTVector, grid: GridSpec) -> TTVector:
    """Mixed derivative ``d^N F / du_1 ... du_N`` (ranks unchanged)."""
    Dp = fd_matrix(grid.points_per_dim, grid.h, 1, "outflow")
    cores = [np.einsum("ij,ajb->aib", Dp, C) for C in F.cores]
    return TTVector(cores)


@dataclass
class CdfDiagnostics:
    min_1d: float
    max_1d: float
    min_2d: float
    max_2d: float
    max_monotonicity_violation: float
    worst_violation_location: tuple
    top_corner: float

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _monotone_violation(a: np.ndarray) -> tuple[float, tuple]:
    worst, where = 0.0, ()
    for ax in range(a.ndim):
        dec = -np.diff(a, axis=ax)
        if dec.size and dec.max() > worst:
            worst = float(dec.max())
            where = (ax,) + tuple(int(i) for i in np.unravel_index(dec.argmax(), dec.shape))
    return worst, where


def cdf_diagnostics(F: TTVector, pairs: Iterable[tuple[int, int]] | None = None) -> CdfDiagnostics:
    """Range and monotonicity of 1D and 2D marginals; never raises on bad values."""
    d = F.d
    if pairs is None:
        pairs = [(0, d // 2)] if d > 1 else []
    lo1, hi1, worst, where = np.inf, -np.inf, 0.0, ()
    for k in range(d):
        m = marginal_cdf(F, [k])
        lo1, hi1 = min(lo1, float(m.min())), max(hi1, float(m.max()))
        v, w = _monotone_violation(m)
        if v > worst:
            worst, where = v, ("1d", k) + w
    lo2, hi2 = np.nan, np.nan
    for i, j in pairs:
        m = marginal_cdf(F, [i, j])
        lo2 = float(m.min()) if np.isnan(lo2) else min(lo2, float(m.min()))
        hi2 = float(m.max()) if np.isnan(hi2) else max(hi2, float(m.max()))
        v, w = _monotone_violation(m)
        if v > worst:
            worst, where = v, ("2d", i, j) + w
    top = float(marginal_cdf(F, []))
    return CdfDiagnostics(lo1, hi1, lo2, hi2, worst, where, top)
