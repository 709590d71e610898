"""Restarted GMRES with TT-compressed Krylov vectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .tt_core import TTVector, tt_add, tt_inner, tt_scale, tt_zeros
from .tt_ops import TTOperator, ttop_apply
from .tt_round import left_orthogonalize, round_rel

log = logging.getLogger(__name__)

Matvec = Union[TTOperator, Callable[[TTVector], TTVector]]


class GmresBreakdown(RuntimeError):
    """The Krylov space became invariant before the tolerance was reached."""


class GmresNotConverged(RuntimeError):
    def __init__(self, result: "GmresResult"):
        super().__init__(
            f"GMRES stopped after {result.iterations} iterations at relative residual "
            f"{result.final_residual:.3e}"
        )
        self.result = result


@dataclass
class GmresConfig:
    rel_tol: float = 1e-8
    max_iters: int = 200
    restart: int = 30
    krylov_trunc_eps: float | None = None

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.restart < 1 or self.max_iters < 1:
            raise ValueError("restart and max_iters must be at least 1")
        if self.krylov_trunc_eps is None:
            self.krylov_trunc_eps = self.rel_tol / 10


@dataclass
class GmresResult:
    x: TTVector
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    final_residual: float = float("nan")
    breakdown: bool = False


def accurate_norm(f: TTVector) -> float:
    """Norm through orthogonalization; avoids the cancellation in ``sqrt(<f, f>)``."""
    return float(np.linalg.norm(left_orthogonalize(f).cores[-1]))


def _matvec(A: Matvec) -> Callable[[TTVector], TTVector]:
    if isinstance(A, TTOperator):
        return lambda v: ttop_apply(A, v)
    return A


def _lincomb(coeffs, vecs) -> TTVector:
    out = tt_scale(vecs[0], coeffs[0])
    for c, v in zip(coeffs[1:], vecs[1:]):
        out = tt_add(out, tt_scale(v, c))
    return out


def tt_gmres(
    A: Matvec,
    b: TTVector,
    x0: TTVector | None,
    cfg: GmresConfig,
    raise_on_failure: bool = False,
) -> GmresResult:
    """Solve ``A x = b``; every history entry is a relative residual.

    Within a restart cycle the entries are the (monotone) least-squares
    estimates; each cycle starts from, and the run ends on, a recomputed true
    residual of the current iterate.
    """
    apply = _matvec(A)
    delta = cfg.krylov_trunc_eps
    bnorm = accurate_norm(b)
    if bnorm == 0.0:
        return GmresResult(tt_zeros(b.mode_sizes), [0.0], True, 0, 0.0)
    x = x0 if x0 is not None else tt_zeros(b.mode_sizes)
    hist: list[float] = []
    its = 0
    while True:
        r_exact = tt_add(b, tt_scale(apply(x), -1.0))
        beta = accurate_norm(r_exact)
        rel = beta / bnorm
        hist.append(rel)
        if rel <= cfg.rel_tol:
            return GmresResult(x, hist, True, its, rel)
        if its >= cfg.max_iters:
            res = GmresResult(x, hist, False, its, rel)
            if raise_on_failure:
                raise GmresNotConverged(res)
            return res
        r = round_rel(r_exact, delta)
        V = [tt_scale(r, 1.0 / beta)]
        H = np.zeros((cfg.restart + 1, cfg.restart))
        y = np.zeros(0)
        broke = False
        for j in range(cfg.restart):
            w = apply(V[j])
            for i in range(j + 1):
                H[i, j] = tt_inner(w, V[i])
                w = round_rel(tt_add(w, tt_scale(V[i], -H[i, j])), delta)
            hnext = accurate_norm(w)
            H[j + 1, j] = hnext
            e1 = np.zeros(j + 2)
            e1[0] = beta
            y, *_ = np.linalg.lstsq(H[: j + 2, : j + 1], e1, rcond=None)
            est = float(np.linalg.norm(e1 - H[: j + 2, : j + 1] @ y)) / bnorm
            hist.append(est)
            its += 1
            if hnext <= 1e-14 * max(abs(H[: j + 1, j]).max(), 1.0):
                broke = True
                break
            if est <= cfg.rel_tol or its >= cfg.max_iters:
                break
            V.append(tt_scale(w, 1.0 / hnext))
        x = round_rel(tt_add(x, _lincomb(y, V[: len(y)])), delta)
        if broke:
            r_exact = tt_add(b, tt_scale(apply(x), -1.0))
            rel = accurate_norm(r_exact) / bnorm
            hist.append(rel)
            if rel <= cfg.rel_tol:
                return GmresResult(x, hist, True, its, rel)
            res = GmresResult(x, hist, False, its, rel, breakdown=True)
            if raise_on_failure:
                raise GmresBreakdown(
                    f"Krylov breakdown after {its} iterations at residual {rel:.3e}"
                )
            return res
        log.debug("gmres cycle done: its=%d est=%.3e", its, hist[-1])
