"""Monte-Carlo benchmark: sample random initial states, solve Burgers, build empirical CDFs."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .burgers_hopf import BurgersParams, physical_diff_matrices

log = logging.getLogger(__name__)

# samples per independent RNG stream; streams are keyed by (seed, chunk index)
CHUNK = 4096


@dataclass
class SampleBatch:
    count: int
    seed: int
    times: tuple[float, ...]
    # values[s, i, j]: snapshot s, sample i, physical node j
    values: np.ndarray = field(repr=False)
    blowups: int = 0
    resolution: int = 0
    dt_mc: float = 0.0


@dataclass
class EmpiricalCDF:
    dims: int
    grid: tuple[np.ndarray, ...]
    values: np.ndarray
    time: float = 0.0
    points: tuple[int, ...] = ()
    count: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != self.dims:
            raise ValueError("table rank does not match dims")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("empirical CDF left [0, 1]")
        for ax in range(v.ndim):
            if np.any(np.diff(v, axis=ax) < 0):
                raise ValueError("empirical CDF is not monotone")


def _stream(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def sample_initial(params: BurgersParams, N: int, rng, size: int | None = None) -> np.ndarray:
    """I.i.d. ``Normal(0, sigma^2)`` nodal values; shape ``(N,)`` or ``(size, N)``."""
    rng = np.random.default_rng(rng)
    shape = (N,) if size is None else (size, N)
    return rng.normal(0.0, params.sigma_ic, size=shape)


def spectral_diff_matrices(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Fourier pseudospectral differentiation on ``N`` periodic nodes over ``[0, 2 pi)``.

    The Nyquist mode is dropped from the first derivative for even ``N``.
    """
    k = np.fft.fftfreq(N, d=1.0 / N)
    k1 = 1j * k
    if N % 2 == 0:
        k1[N // 2] = 0.0
    I = np.eye(N)
    D1 = np.real(np.fft.ifft(k1[:, None] * np.fft.fft(I, axis=0), axis=0))
    D2 = np.real(np.fft.ifft(-(k**2)[:, None] * np.fft.fft(I, axis=0), axis=0))
    return D1, D2


def diff_matrices(N: int, spatial: str = "fd") -> tuple[np.ndarray, np.ndarray]:
    if spatial == "fd":
        return physical_diff_matrices(N)
    if spatial == "spectral":
        return spectral_diff_matrices(N)
    raise ValueError(f"unknown spatial discretization {spatial!r}")


def burgers_rhs(u: np.ndarray, params: BurgersParams, D1: np.ndarray, D2: np.ndarray) -> np.ndarray:
    """Semi-discrete right-hand side; ``u`` has nodes along the last axis."""
    return -u * (u @ D1.T) + params.gamma * (u @ D2.T) + params.reaction(u)


def solve_burgers(
    u0: np.ndarray,
    params: BurgersParams,
    times: Sequence[float],
    dt_mc: float = 1e-3,
    spatial: str = "fd",
) -> np.ndarray:
    """Classical RK4 method of lines on the periodic nodes.

    ``u0`` is ``(N,)`` or a batch ``(M, N)``. Returns snapshots at ``times``
    stacked on a leading axis; rows that stop being finite are set to NaN.
    ``spatial`` picks the finite-difference matrices shared with the CDF
    operator (``fd``) or Fourier pseudospectral ones (``spectral``).
    """
    u = np.array(u0, dtype=np.float64)
    N = u.shape[-1]
    D1, D2 = diff_matrices(N, spatial)
    times = [float(t) for t in times]
    if any(t < 0 for t in times):
        raise ValueError("snapshot times must be non-negative")
    out = np.empty((len(times),) + u.shape)
    t = 0.0
    order = np.argsort(times)
    k = 0
    while k < len(order) and times[order[k]] <= 1e-14:
        out[order[k]] = u
        k += 1
    while k < len(order):
        target = times[order[k]]
        nsub = max(int(np.ceil((target - t) / dt_mc - 1e-9)), 1)
        h = (target - t) / nsub
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(nsub):
                k1 = burgers_rhs(u, params, D1, D2)
                k2 = burgers_rhs(u + 0.5 * h * k1, params, D1, D2)
                k3 = burgers_rhs(u + 0.5 * h * k2, params, D1, D2)
                k4 = burgers_rhs(u + h * k3, params, D1, D2)
                u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        bad = ~np.isfinite(u)
        if bad.any():
            rows = bad.any(axis=-1) if u.ndim > 1 else bad.any()
            u[rows] = np.nan
        t = target
        out[order[k]] = u
        k += 1
    return out


def sample_batch(
    params: BurgersParams,
    N: int,
    count: int,
    seed: int,
    times: Sequence[float],
    dt_mc: float = 1e-3,
    workers: int = 1,
    spatial: str = "fd",
) -> SampleBatch:
    """Sample and solve ``count`` trajectories.

    Chunks of ``CHUNK`` samples draw from their own stream keyed by
    ``(seed, chunk)``, so the batch does not depend on ``workers``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if spatial not in ("fd", "spectral"):
        raise ValueError(f"unknown spatial discretization {spatial!r}")
    nchunks = -(-count // CHUNK)

    def run(c):
        m = min(CHUNK, count - c * CHUNK)
        u0 = sample_initial(params, N, _stream(seed, c), size=m)
        return solve_burgers(u0, params, times, dt_mc, spatial)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(nchunks)))
    else:
        parts = [run(c) for c in range(nchunks)]
    values = np.concatenate(parts, axis=1)
    blow = int(np.isnan(values).any(axis=(0, 2)).sum())
    if blow:
        log.warning("%d of %d samples blew up", blow, count)
    return SampleBatch(count, seed, tuple(times), values, blow, N, dt_mc)


def empirical_cdf(
    samples: np.ndarray, eval_grid: Sequence[np.ndarray] | np.ndarray, time: float = 0.0,
    points: tuple[int, ...] = (),
) -> EmpiricalCDF:
    """Right-continuous empirical CDF of 1D samples ``(M,)`` or 2D samples ``(M, 2)``.

    Samples containing NaN (blow-ups) are dropped.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = X[np.isfinite(X).all(axis=1)]
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    dims = X.shape[1]
    if dims not in (1, 2):
        raise ValueError("only 1D and 2D empirical CDFs are supported")
    grids = (eval_grid,) * dims if isinstance(eval_grid, np.ndarray) else tuple(eval_grid)
    grids = tuple(np.asarray(g, dtype=np.float64) for g in grids)
    # bin b collects samples in (grid[b-1], grid[b]]; b == n means above the grid
    bins = [np.searchsorted(g, X[:, a], side="left") for a, g in enumerate(grids)]
    shape = tuple(len(g) + 1 for g in grids)
    hist = np.zeros(shape)
    np.add.at(hist, tuple(bins), 1.0)
    cum = hist
    for ax in range(dims):
        cum = np.cumsum(cum, axis=ax)
    table = cum[tuple(slice(0, len(g)) for g in grids)] / X.shape[0]
    return EmpiricalCDF(dims, grids, np.clip(table, 0.0, 1.0), time, points, X.shape[0])


def batch_cdf(batch: SampleBatch, points: Sequence[int], eval_grid, snapshot: int) -> EmpiricalCDF:
    vals = batch.values[snapshot][:, list(points)]
    return empirical_cdf(vals, eval_grid, batch.times[snapshot], tuple(points))


def _trap_weights(g: np.ndarray) -> np.ndarray:
    w = np.zeros_like(g)
    dg = np.diff(g)
    w[:-1] += 0.5 * dg
    w[1:] += 0.5 * dg
    return w


def compare_cdf(tt_marginal: np.ndarray, bench: EmpiricalCDF) -> tuple[float, float]:
    """Trapezoid-weighted L2 and sup-norm differences on the benchmark grid."""
    a = np.asarray(tt_marginal, dtype=np.float64)
    if a.shape != bench.values.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {bench.values.shape}")
    diff = a - bench.values
    W = np.ones(())
    for g in bench.grid:
        W = np.multiply.outer(W, _trap_weights(g))
    l2 = float(np.sqrt(np.sum(W * diff**2)))
    return l2, float(np.abs(diff).max())


def l2_noise_floor(bench: EmpiricalCDF) -> float:
    """Expected L2 size of the sampling error, ``sqrt(int F (1 - F) / count)``."""
    if bench.count < 1:
        raise ValueError("benchmark carries no sample count")
    v = bench.values
    W = np.ones(())
    for g in bench.grid:
        W = np.multiply.outer(W, _trap_weights(g))
    return float(np.sqrt(np.sum(W * v * (1.0 - v)) / bench.count))


def ks_band(count: int) -> float:
    """Half-width of the 95% Kolmogorov-Smirnov confidence band."""
    return float(1.36 / np.sqrt(count))
