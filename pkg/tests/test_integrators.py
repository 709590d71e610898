import numpy as np
import pytest
from scipy.linalg import expm

from ttfde.gmres import GmresConfig
from ttfde.integrators import (
    StepConfig,
    integrate,
    richardson_local_error,
    step,
    step_euler_explicit,
    step_euler_implicit,
    step_midpoint_explicit,
    step_midpoint_implicit,
)
from ttfde.tt_core import tt_add, tt_random, tt_rank1, tt_to_dense
from ttfde.tt_ops import KroneckerTerm, fd_matrix, ttop_from_terms, ttop_to_dense
from ttfde.tt_round import RankCapExceeded

SCHEMES = ["euler_explicit", "midpoint_explicit", "euler_implicit", "midpoint_implicit"]
TIGHT = GmresConfig(rel_tol=1e-13, krylov_trunc_eps=1e-15)


def scalar_problem():
    G = ttop_from_terms([KroneckerTerm({0: -np.eye(3)})], (3,))
    f0 = tt_rank1([np.array([1.0, 2.0, -0.5])])
    return G, f0


def heat3d(n=8, nu=0.3, adv=0.0):
    h = 2 * np.pi / n
    D2 = fd_matrix(n, h, 2)
    D1 = fd_matrix(n, h, 1)
    terms = [KroneckerTerm({k: D2}, nu) for k in range(3)]
    if adv:
        terms += [KroneckerTerm({k: D1}, -adv) for k in range(3)]
    G = ttop_from_terms(terms, (n,) * 3)
    x = 2 * np.pi * np.arange(n) / n
    f0 = tt_add(tt_rank1([np.sin(x) + 1.5] * 3), tt_rank1([np.cos(2 * x)] * 3))
    return G, f0, h


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_operator_keeps_state(scheme):
    G = ttop_from_terms([KroneckerTerm({0: np.zeros((4, 4))})], (4, 4, 4))
    f = tt_random((4, 4, 4), (1, 2, 2, 1), 0)
    g, rec = step(G, f, StepConfig(dt=0.1, scheme=scheme, tol_coeff=1e-6, gmres=TIGHT))
    np.testing.assert_allclose(tt_to_dense(g), tt_to_dense(f), atol=1e-12)
    assert rec.time == pytest.approx(0.1)
    assert richardson_local_error(G, f, StepConfig(dt=0.1, scheme=scheme, tol_coeff=1e-6, gmres=TIGHT)) <= 1e-11


@pytest.mark.parametrize(
    "fn, factor",
    [
        (step_euler_explicit, lambda k: 1 - k),
        (step_midpoint_explicit, lambda k: 1 - k + k * k / 2),
        (step_euler_implicit, lambda k: 1 / (1 + k)),
        (step_midpoint_implicit, lambda k: (1 - k / 2) / (1 + k / 2)),
    ],
)
def test_scalar_amplification(fn, factor):
    G, f0 = scalar_problem()
    dt = 0.1
    g, rec = fn(G, f0, StepConfig(dt=dt, gmres=TIGHT))
    np.testing.assert_allclose(tt_to_dense(g), factor(dt) * tt_to_dense(f0), rtol=1e-12)
    assert rec.ranks == (1, 1)


def dense_step(scheme, M, v, dt):
    I = np.eye(len(v))
    if scheme == "euler_explicit":
        return v + dt * M @ v
    if scheme == "midpoint_explicit":
        return v + dt * M @ (v + 0.5 * dt * M @ v)
    if scheme == "euler_implicit":
        return np.linalg.solve(I - dt * M, v)
    return np.linalg.solve(I - 0.5 * dt * M, v + 0.5 * dt * M @ v)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_matches_dense_stepper(scheme):
    G, f0, _ = heat3d(adv=0.4)
    M = ttop_to_dense(G)
    dt = 0.02
    tol = 1e-12 / dt ** (2 if "euler" in scheme else 3)
    cfg = StepConfig(dt=dt, scheme=scheme, tol_coeff=tol, gmres=TIGHT)
    f, v = f0, tt_to_dense(f0).ravel()
    for k in range(3):
        f, _ = step(G, f, cfg)
        v = dense_step(scheme, M, v, dt)
    assert np.abs(tt_to_dense(f).ravel() - v).max() <= 1e-10 * np.abs(v).max()


def test_implicit_euler_stiff_diffusion_stable():
    G, f0, h = heat3d(n=16, nu=1.0)
    dt_explicit = h**2 / (2 * 3 * 1.0)
    dt = 100 * dt_explicit
    cfg = StepConfig(dt=dt, scheme="euler_implicit", tol_coeff=1e-10 / dt**2, gmres=GmresConfig(rel_tol=1e-11))
    M = ttop_to_dense(G)
    f, v = f0, tt_to_dense(f0).ravel()
    for _ in range(5):
        f, rec = step(G, f, cfg)
        v = np.linalg.solve(np.eye(len(v)) - dt * M, v)
    out = tt_to_dense(f).ravel()
    assert np.abs(out).max() <= np.abs(tt_to_dense(f0)).max()
    assert np.abs(out - v).max() <= 1e-8
    # the explicit scheme at the same step blows up
    fe = f0
    for _ in range(5):
        fe, _ = step(G, fe, StepConfig(dt=dt, scheme="euler_explicit", tol_coeff=1e-10 / dt**2))
    assert np.abs(tt_to_dense(fe)).max() > 1e3


def _slope(errs, dts):
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


@pytest.mark.parametrize("scheme, expected", [("euler_explicit", 2), ("midpoint_explicit", 3),
                                              ("euler_implicit", 2), ("midpoint_implicit", 3)])
def test_richardson_slope_scalar(scheme, expected):
    G, f0 = scalar_problem()
    dts = [0.1 / 2**k for k in range(4)]
    errs = [richardson_local_error(G, f0, StepConfig(dt=dt, scheme=scheme, gmres=TIGHT)) for dt in dts]
    assert _slope(errs, dts) == pytest.approx(expected, abs=0.1)


def test_richardson_slope_heat():
    G, f0, _ = heat3d()
    dts = [0.02 / 2**k for k in range(4)]
    errs = []
    for dt in dts:
        cfg = StepConfig(dt=dt, scheme="midpoint_explicit", tol_coeff=1e-3)
        errs.append(richardson_local_error(G, f0, cfg))
    assert _slope(errs, dts) == pytest.approx(3, abs=0.25)


def test_midpoint_implicit_second_order_global():
    G, f0, _ = heat3d(nu=0.5)
    M = ttop_to_dense(G)
    T = 0.2
    exact = expm(T * M) @ tt_to_dense(f0).ravel()
    errs = []
    for nsteps in (4, 8, 16):
        dt = T / nsteps
        cfg = StepConfig(dt=dt, scheme="midpoint_implicit", tol_coeff=1e-12 / dt**3, gmres=TIGHT)
        traj = integrate(G, f0, T, cfg, snapshot_times=[T])
        errs.append(np.abs(tt_to_dense(traj.snapshots[-1][1]).ravel() - exact).max())
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2, abs=0.1)
    assert np.log2(errs[1] / errs[2]) == pytest.approx(2, abs=0.1)


def test_step_eps_and_config():
    cfg = StepConfig(dt=0.1, scheme="midpoint_explicit", tol_coeff=2.0)
    assert cfg.order == 2 and cfg.step_eps == pytest.approx(2e-3)
    assert StepConfig(dt=0.1, scheme="euler_implicit").step_eps == pytest.approx(1e-2)
    with pytest.raises(ValueError):
        StepConfig(dt=0.1, scheme="rk4")
    with pytest.raises(ValueError):
        StepConfig(dt=-1.0)


def test_rank_cap_reported_not_clipped():
    G, f0, _ = heat3d(adv=0.4)
    f = tt_random((8, 8, 8), (1, 4, 4, 1), 0)
    cfg = StepConfig(dt=0.01, tol_coeff=1e-12, max_rank=2)
    with pytest.raises(RankCapExceeded):
        step(G, f, cfg)
    g, rec = step(G, f, StepConfig(dt=0.01, tol_coeff=1e-12, max_rank=2, clip_rank=True))
    assert rec.max_rank <= 2
    traj = integrate(G, f, 0.05, cfg)
    assert not traj.completed and "exceed" in traj.error and traj.records == []


def test_integrate_snapshots_and_validation():
    G, f0, _ = heat3d()
    cfg = StepConfig(dt=0.01, tol_coeff=1e-4)
    seen = []
    traj = integrate(G, f0, 0.05, cfg, snapshot_times=[0.0, 0.02, 0.05], callback=seen.append)
    assert [t for t, _ in traj.snapshots] == [0.0, 0.02, 0.05]
    assert len(traj.records) == len(seen) == 5
    assert traj.records[-1].time == pytest.approx(0.05)
    assert all(r.step_eps_used == pytest.approx(1e-4 * 0.01**3) for r in traj.records)
    with pytest.raises(ValueError):
        integrate(G, f0, 0.055, cfg)
    with pytest.raises(ValueError):
        integrate(G, f0, 0.05, cfg, snapshot_times=[0.015])


def test_distributed_truncation_matches_serial():
    G, f0, _ = heat3d(adv=0.4)
    a, _ = step(G, f0, StepConfig(dt=0.01, tol_coeff=1e-2))
    b, _ = step(G, f0, StepConfig(dt=0.01, tol_coeff=1e-2, workers=3))
    assert a.ranks == b.ranks
    assert np.linalg.norm(tt_to_dense(a) - tt_to_dense(b)) <= 1e-10 * np.linalg.norm(tt_to_dense(a))
