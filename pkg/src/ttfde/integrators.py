"""Rank-adaptive step-truncation integrators.

Every scheme takes a conventional step off the low-rank manifold and maps it
back by truncation. Ranks are controlled through the truncation tolerance
``tol_coeff * dt**(p + 1)`` for a scheme of order ``p``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .gmres import GmresConfig, GmresNotConverged, accurate_norm, tt_gmres
from .tt_core import TTVector, tt_add, tt_scale
from .tt_ops import TTOperator, ttop_apply
from .tt_parallel import gather, par_truncate, partition, scatter
from .tt_round import RankCapExceeded, round_tt

log = logging.getLogger(__name__)

SCHEMES = ("euler_explicit", "midpoint_explicit", "euler_implicit", "midpoint_implicit")
ORDER = {
    "euler_explicit": 1,
    "euler_implicit": 1,
    "midpoint_explicit": 2,
    "midpoint_implicit": 2,
}


class StepFailure(RuntimeError):
    """A time step could not be completed (solver failure or rank cap)."""


@dataclass
class StepConfig:
    dt: float
    scheme: str = "midpoint_explicit"
    tol_coeff: float = 1.0
    max_rank: int = 10_000
    clip_rank: bool = False
    gmres: GmresConfig = field(default_factory=GmresConfig)
    stabilization_coeff: float = 0.0
    # truncations run on the distributed engine when > 1
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0 or not self.tol_coeff > 0 or self.max_rank < 1:
            raise ValueError("dt and tol_coeff must be positive and max_rank >= 1")

    @property
    def order(self) -> int:
        return ORDER[self.scheme]

    @property
    def step_eps(self) -> float:
        return self.tol_coeff * self.dt ** (self.order + 1)


@dataclass
class StepRecord:
    time: float
    ranks: tuple[int, ...]
    step_eps_used: float
    gmres_iters: int | None
    wall_time: float
    gmres_residual: float | None = None

    @property
    def max_rank(self) -> int:
        return max(self.ranks)


def _apply(G, f: TTVector) -> TTVector:
    return ttop_apply(G, f) if isinstance(G, TTOperator) else G(f)


def _trunc(f: TTVector, eps: float, cfg: StepConfig) -> TTVector:
    cap = cfg.max_rank if cfg.clip_rank else None
    if cfg.workers > 1 and f.d > 1:
        dist = scatter(f, partition(f.mode_sizes, cfg.workers))
        g = gather(par_truncate(dist, eps, cap)[0])
    else:
        g = round_tt(f, eps, cap)
    if g.max_rank > cfg.max_rank:
        raise RankCapExceeded(g.ranks, cfg.max_rank)
    return g


def _axpy(f: TTVector, a: float, g: TTVector) -> TTVector:
    return tt_add(f, tt_scale(g, a))


def step_euler_explicit(G, f: TTVector, cfg: StepConfig, t: float = 0.0):
    t0 = time.perf_counter()
    eps = cfg.step_eps
    inc = _trunc(_apply(G, f), eps / cfg.dt, cfg)
    out = _trunc(_axpy(f, cfg.dt, inc), eps, cfg)
    return out, StepRecord(t + cfg.dt, out.ranks, eps, None, time.perf_counter() - t0)


def step_midpoint_explicit(G, f: TTVector, cfg: StepConfig, t: float = 0.0):
    t0 = time.perf_counter()
    dt, eps = cfg.dt, cfg.step_eps
    k1 = _trunc(_apply(G, f), eps / dt, cfg)
    k2 = _trunc(_apply(G, _axpy(f, 0.5 * dt, k1)), eps / dt, cfg)
    out = _trunc(_axpy(f, dt, k2), eps, cfg)
    return out, StepRecord(t + dt, out.ranks, eps, None, time.perf_counter() - t0)


def _solve(G, rhs: TTVector, guess: TTVector, shift: float, cfg: StepConfig):
    """Solve ``(I - shift*G) x = rhs`` with TT-GMRES."""

    def A(v):
        return _axpy(v, -shift, _apply(G, v))

    result = tt_gmres(A, rhs, guess, cfg.gmres)
    if not result.converged:
        raise StepFailure(
            f"GMRES did not converge: residual {result.final_residual:.3e} after "
            f"{result.iterations} iterations (history tail {result.residual_history[-3:]})"
        ) from GmresNotConverged(result)
    return result


def step_euler_implicit(G, f: TTVector, cfg: StepConfig, t: float = 0.0):
    t0 = time.perf_counter()
    eps = cfg.step_eps
    res = _solve(G, f, f, cfg.dt, cfg)
    out = _trunc(res.x, eps, cfg)
    return out, StepRecord(
        t + cfg.dt, out.ranks, eps, res.iterations, time.perf_counter() - t0, res.final_residual
    )


def step_midpoint_implicit(G, f: TTVector, cfg: StepConfig, t: float = 0.0):
    """Solves ``(I - dt/2 G) f_new = (I + dt/2 G) f`` (trapezoidal form for linear G)."""
    t0 = time.perf_counter()
    dt, eps = cfg.dt, cfg.step_eps
    rhs = _trunc(_axpy(f, 0.5 * dt, _apply(G, f)), eps, cfg)
    res = _solve(G, rhs, rhs, 0.5 * dt, cfg)
    out = _trunc(res.x, eps, cfg)
    return out, StepRecord(
        t + dt, out.ranks, eps, res.iterations, time.perf_counter() - t0, res.final_residual
    )


STEPPERS: dict[str, Callable] = {
    "euler_explicit": step_euler_explicit,
    "midpoint_explicit": step_midpoint_explicit,
    "euler_implicit": step_euler_implicit,
    "midpoint_implicit": step_midpoint_implicit,
}


def step(G, f: TTVector, cfg: StepConfig, t: float = 0.0):
    return STEPPERS[cfg.scheme](G, f, cfg, t)


def richardson_local_error(G, f: TTVector, cfg: StepConfig) -> float:
    """``||one step - Richardson extrapolation||`` for a step of size ``cfg.dt``.

    The extrapolation combines one full step with two half steps,
    ``(2**p * half2 - full) / (2**p - 1)``, all with the same operator ``G``.
    """
    p = cfg.order
    full, _ = step(G, f, cfg)
    half_cfg = replace(cfg, dt=cfg.dt / 2)
    h1, _ = step(G, f, half_cfg)
    h2, _ = step(G, h1, half_cfg)
    w = 2.0**p
    # full - (w*half2 - full)/(w - 1) simplified, exact zero when the steps agree
    return w / (w - 1.0) * accurate_norm(_axpy(full, -1.0, h2))


@dataclass
class Trajectory:
    snapshots: list[tuple[float, TTVector]]
    records: list[StepRecord]
    completed: bool = True
    error: str | None = None


def integrate(
    G,
    f0: TTVector,
    T: float,
    cfg: StepConfig,
    snapshot_times: Sequence[float] = (),
    callback: Callable[[StepRecord], None] | None = None,
) -> Trajectory:
    """Fixed-step march from 0 to ``T``; snapshots must sit on the step grid."""
    if not T > 0:
        raise ValueError("T must be positive")
    nsteps = int(round(T / cfg.dt))
    if abs(nsteps * cfg.dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T = {T} is not a multiple of dt = {cfg.dt}")
    wanted = {}
    for ts in snapshot_times:
        k = int(round(ts / cfg.dt))
        if abs(k * cfg.dt - ts) > 1e-9 * max(T, 1.0) or not 0 <= k <= nsteps:
            raise ValueError(f"snapshot time {ts} is not on the step grid")
        wanted[k] = ts
    traj = Trajectory([], [])
    if 0 in wanted:
        traj.snapshots.append((wanted[0], f0))
    f = f0
    for k in range(1, nsteps + 1):
        try:
            f, rec = step(G, f, cfg, (k - 1) * cfg.dt)
        except (StepFailure, RankCapExceeded, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.error("step %d failed: %s", k, exc)
            traj.completed = False
            traj.error = f"step {k}: {exc}"
            break
        rec.time = k * cfg.dt
        traj.records.append(rec)
        if callback is not None:
            callback(rec)
        if k in wanted:
            traj.snapshots.append((wanted[k], f))
    return traj
