"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import copy

import numpy as np
import pytest

from ttfde.burgers_hopf import (
    BurgersParams,
    GridSpec,
    assemble_cdf_operator,
    gaussian_cdf_ic,
    marginal_cdf,
)
from ttfde.cli import DEFAULTS, grid_of, params_of, step_of, x_pi_index
from ttfde.gmres import GmresConfig, tt_gmres
from ttfde.integrators import SCHEMES, StepConfig, integrate, richardson_local_error, step
from ttfde.mc_oracle import (
    batch_cdf,
    compare_cdf,
    empirical_cdf,
    ks_band,
    l2_noise_floor,
    sample_batch,
)
from ttfde.tt_core import flatten_h, flatten_v, tt_add, tt_random, tt_rank1, tt_scale, tt_to_dense
from ttfde.tt_ops import (
    KroneckerTerm,
    cumtrapz_matrix,
    fd_matrix,
    ttop_apply,
    ttop_from_terms,
    ttop_to_dense,
)
from ttfde.tt_parallel import gather, par_left_orthogonalize, par_truncate, partition, scatter
from ttfde.tt_round import left_orthogonalize, right_orthogonalize, truncate

from conftest import report
from oracles import dense_oracle_matrix

REL_EPS = (1e-2, 1e-6, 1e-10)


def random_tts(count, seed, max_d=4, max_mode=8, max_rank=6, min_d=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        d = int(rng.integers(min_d, max_d + 1))
        modes = [int(m) for m in rng.integers(1, max_mode + 1, size=d)]
        ranks = [1] + [int(r) for r in rng.integers(1, max_rank + 1, size=d - 1)] + [1]
        out.append(tt_random(modes, ranks, rng))
    return out


def dense_err(f, g):
    return float(np.linalg.norm(tt_to_dense(f) - tt_to_dense(g)))


def left_gram(f):
    return max(
        (np.linalg.norm(flatten_v(C).T @ flatten_v(C) - np.eye(C.shape[2])) for C in f.cores[:-1]),
        default=0.0,
    )


def right_gram(f):
    return max(
        (np.linalg.norm(flatten_h(C) @ flatten_h(C).T - np.eye(C.shape[0])) for C in f.cores[1:]),
        default=0.0,
    )


def test_criterion_1_truncation_contract():
    worst = 0.0
    for f in random_tts(200, 1):
        norm = np.linalg.norm(tt_to_dense(f))
        for rel in REL_EPS:
            eps = rel * norm
            g, _ = truncate(f, eps)
            worst = max(worst, dense_err(f, g) / eps)
    report(1, worst <= 1.0, f"max ||g - f|| / eps = {worst:.3f} over 200 tensors x 3 tolerances")


def test_criterion_2_orthogonality():
    gram, values = 0.0, 0.0
    for k, f in enumerate(random_tts(100, 2)):
        scale = np.linalg.norm(tt_to_dense(f))
        lo, ro = left_orthogonalize(f), right_orthogonalize(f)
        P = 1 + k % 4
        po = gather(par_left_orthogonalize(scatter(f, partition(f.mode_sizes, P))))
        gram = max(gram, left_gram(lo), right_gram(ro), left_gram(po))
        values = max(values, *(dense_err(f, g) / scale for g in (lo, ro, po)))
    ok = gram <= 1e-12 and values <= 1e-12
    report(2, ok, f"max Gram residual {gram:.2e}, max relative value change {values:.2e}")


def test_criterion_3_parallel_equivalence():
    worst, bitwise, ranks_match = 0.0, True, True
    cases = random_tts(40, 3, max_mode=16, min_d=2)
    for f in cases:
        f2 = tt_add(f, tt_scale(f, 0.5))
        scale = np.linalg.norm(tt_to_dense(f2))
        for P in (1, 2, 3, 4):
            part = partition(f2.mode_sizes, P)
            back = gather(scatter(f2, part))
            bitwise &= all(np.array_equal(a, b) for a, b in zip(back.cores, f2.cores))
            for rel in REL_EPS:
                s, _ = truncate(f2, rel * scale)
                g = gather(par_truncate(scatter(f2, part), rel * scale)[0])
                ranks_match &= g.ranks == s.ranks
                worst = max(worst, dense_err(s, g) / np.linalg.norm(tt_to_dense(s)))
    ok = worst <= 1e-10 and bitwise and ranks_match
    report(
        3, ok,
        f"max relative difference to serial {worst:.2e} (P = 1..4), bitwise round trip {bitwise}, "
        f"equal ranks {ranks_match}",
    )


def test_criterion_4_temporal_order():
    cfg = DEFAULTS["order_study"]
    grid = GridSpec(cfg["N"], cfg["points_per_dim"])
    params = BurgersParams()
    G = assemble_cdf_operator(grid, params)
    f0 = gaussian_cdf_ic(grid, params)
    dts = [2.0**-k for k in cfg["dt_exponents"]]
    slopes = {}
    for scheme in SCHEMES:
        errs = []
        for dt in dts:
            sc = StepConfig(
                dt=dt, scheme=scheme, tol_coeff=cfg["tol_coeff"],
                gmres=GmresConfig(rel_tol=cfg["gmres_rel_tol"]),
            )
            errs.append(richardson_local_error(G, f0, sc))
        slopes[scheme] = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    target = {"euler_explicit": 2, "euler_implicit": 2, "midpoint_explicit": 3, "midpoint_implicit": 3}
    ok = all(abs(slopes[s] - target[s]) <= 0.25 for s in SCHEMES)
    detail = ", ".join(f"{s} {slopes[s]:.3f} (want {target[s]})" for s in SCHEMES)
    report(4, ok, f"Richardson slopes: {detail}")


def dense_stepper(M, scheme, dt):
    I = np.eye(M.shape[0])
    if scheme == "euler_explicit":
        return I + dt * M
    if scheme == "midpoint_explicit":
        return I + dt * M + 0.5 * dt**2 * M @ M
    if scheme == "euler_implicit":
        return np.linalg.inv(I - dt * M)
    return np.linalg.solve(I - 0.5 * dt * M, I + 0.5 * dt * M)


def test_criterion_5_dense_oracle():
    grid, params = GridSpec(2, 16), BurgersParams()
    G = assemble_cdf_operator(grid, params)
    M = dense_oracle_matrix(grid, params)
    op_err = float(np.abs(ttop_to_dense(G) - M).max())
    dt, steps = 0.004, 10
    f0 = gaussian_cdf_ic(grid, params)
    traj_err = {}
    for scheme in SCHEMES:
        p = 1 if "euler" in scheme else 2
        sc = StepConfig(
            dt=dt, scheme=scheme, tol_coeff=1e-12 / dt ** (p + 1),
            gmres=GmresConfig(rel_tol=1e-13),
        )
        f, v = f0, tt_to_dense(f0).ravel()
        S = dense_stepper(M, scheme, dt)
        worst = 0.0
        for _ in range(steps):
            f, _ = step(G, f, sc)
            v = S @ v
            worst = max(worst, float(np.abs(tt_to_dense(f).ravel() - v).max()))
        traj_err[scheme] = worst
    ok = op_err <= 1e-10 and all(e <= 1e-8 for e in traj_err.values())
    detail = ", ".join(f"{s} {e:.1e}" for s, e in traj_err.items())
    report(5, ok, f"operator max diff {op_err:.1e}; 10-step trajectory max diff {detail}")


def test_criterion_6_gmres():
    grid, params = GridSpec(2, 32), BurgersParams()
    G = assemble_cdf_operator(grid, params)
    M = dense_oracle_matrix(grid, params)
    I = np.eye(M.shape[0])
    f0 = gaussian_cdf_ic(grid, params)
    gcfg = GmresConfig()
    worst_rep, worst_gap = 0.0, 0.0
    for dt in (2.0**-4, 2.0**-6):
        for shift, rhs in ((dt, f0), (0.5 * dt, tt_add(f0, tt_scale(ttop_apply(G, f0), 0.5 * dt)))):
            res = tt_gmres(lambda v: tt_add(v, tt_scale(ttop_apply(G, v), -shift)), rhs, rhs, gcfg)
            b = tt_to_dense(rhs).ravel()
            true = np.linalg.norm(b - (I - shift * M) @ tt_to_dense(res.x).ravel()) / np.linalg.norm(b)
            worst_rep = max(worst_rep, res.final_residual if res.converged else np.inf)
            worst_gap = max(worst_gap, abs(true - res.final_residual))

    # stiff diffusion at 100x the forward-Euler limit
    n, d = 16, 3
    h = 2 * np.pi / n
    D2 = fd_matrix(n, h, 2, "periodic")
    H = ttop_from_terms([KroneckerTerm({k: D2}) for k in range(d)], (n,) * d)
    dt = 100 * h**2 / (2 * d)
    x = h * np.arange(n)
    u = tt_add(tt_rank1([1 + 0.5 * np.sin(x)] * d), tt_rank1([np.cos(3 * x)] * d))
    Hd = ttop_to_dense(H)
    S = np.linalg.inv(np.eye(n**d) - dt * Hd)
    sc = StepConfig(dt=dt, scheme="euler_implicit", tol_coeff=1e-12 / dt**2, gmres=GmresConfig(rel_tol=1e-12))
    v = tt_to_dense(u).ravel()
    norms, stiff_err = [np.linalg.norm(v)], 0.0
    for _ in range(10):
        u, _ = step(H, u, sc)
        v = S @ v
        norms.append(np.linalg.norm(tt_to_dense(u)))
        stiff_err = max(stiff_err, float(np.abs(tt_to_dense(u).ravel() - v).max()))
    stable = all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))
    ok = worst_rep <= gcfg.rel_tol and worst_gap <= 10 * gcfg.krylov_trunc_eps and stable and stiff_err <= 1e-8
    report(
        6, ok,
        f"max reported residual {worst_rep:.2e} (rel_tol {gcfg.rel_tol:.0e}), max |recomputed - reported| "
        f"{worst_gap:.2e} (limit {10 * gcfg.krylov_trunc_eps:.0e}); stiff dt = 100x limit: stable {stable}, "
        f"max diff to dense {stiff_err:.1e}",
    )


@pytest.mark.slow
def test_criterion_7_convergence_in_n():
    cfg = copy.deepcopy(DEFAULTS)
    t = cfg["compare"]["time"]
    params = params_of(cfg)
    mc = cfg["mc"]
    batch = sample_batch(params, mc["resolution"], mc["count"], cfg["seed"], [t], mc["dt_mc"], spatial=mc["spatial"])
    u = grid_of(cfg).u
    bench = batch_cdf(batch, [0], u, 0)
    floor = l2_noise_floor(bench)
    errors = {}
    for N in cfg["compare"]["N_sweep"]:
        grid = grid_of(cfg, N)
        G = assemble_cdf_operator(grid, params)
        traj = integrate(G, gaussian_cdf_ic(grid, params), t, step_of(cfg), [t])
        assert traj.completed, traj.error
        errors[N] = compare_cdf(marginal_cdf(traj.snapshots[-1][1], [0]), bench)[0]
    Ns = sorted(errors)
    e = [errors[N] for N in Ns]
    monotone = all(b < a for a, b in zip(e, e[1:]))
    ratio = e[0] / e[-1]
    above = all(x > floor for x in e)
    ok = monotone and ratio >= 1.5 and above
    detail = ", ".join(f"N={N} {errors[N]:.5f}" for N in Ns)
    report(
        7, ok,
        f"L2 errors {detail}; monotone {monotone}, N={Ns[0]}/N={Ns[-1]} ratio {ratio:.2f} (want >= 1.5), "
        f"noise floor {floor:.5f}, all above floor {above} (benchmark N = {mc['resolution']}, "
        f"{mc['count']} samples)",
    )


def test_criterion_8_initial_closure():
    cfg = copy.deepcopy(DEFAULTS)
    params = params_of(cfg)
    count = cfg["mc"]["count"]
    band = ks_band(count)
    worst = {}
    for N in (2, 4, 6):
        grid = grid_of(cfg, N)
        F0 = gaussian_cdf_ic(grid, params)
        batch = sample_batch(params, N, count, cfg["seed"] + N, [0.0])
        b = x_pi_index(N)
        w1 = compare_cdf(marginal_cdf(F0, [0]), batch_cdf(batch, [0], grid.u, 0))[1]
        w2 = compare_cdf(marginal_cdf(F0, [0, b]), batch_cdf(batch, [0, b], (grid.u, grid.u), 0))[1]
        worst[N] = max(w1, w2)
    ok = all(w <= band for w in worst.values())
    detail = ", ".join(f"N={N} {w:.4f}" for N, w in worst.items())
    report(8, ok, f"max |F_tt - F_mc| over 1D and 2D marginals {detail}; KS band {band:.4f}")


def test_criterion_9_property_suites():
    failures = []
    rng = np.random.default_rng(9)

    # rank arithmetic of tt_add
    for f in random_tts(100, 90):
        r = [1] + [int(x) for x in rng.integers(1, 5, size=f.d - 1)] + [1]
        g = tt_random(f.mode_sizes, r, rng)
        s = tt_add(f, g)
        want = (1,) + tuple(a + b for a, b in zip(f.ranks[1:-1], g.ranks[1:-1])) + (1,)
        err = np.abs(tt_to_dense(s) - tt_to_dense(f) - tt_to_dense(g)).max()
        if s.ranks != want or err > 1e-12 * max(1.0, np.abs(tt_to_dense(s)).max()):
            failures.append("tt_add")
            break

    # idempotent truncation on the stated tolerances, and tolerance monotonicity
    for f in random_tts(200, 91):
        norm = np.linalg.norm(tt_to_dense(f))
        for rel in REL_EPS:
            g, _ = truncate(f, rel * norm)
            if truncate(g, rel * norm)[0].ranks != g.ranks:
                failures.append(f"idempotence at {rel}")
        rel = 10 ** rng.uniform(-8, -0.5)
        factor = 10 ** rng.uniform(0, 2)
        g1, _ = truncate(f, rel * norm)
        g2, _ = truncate(f, rel * factor * norm)
        if any(a < b for a, b in zip(g1.ranks, g2.ranks)):
            failures.append("monotonicity")

    # cumtrapz / fd duality: second-order convergence on random even cosine series
    for _ in range(20):
        a = rng.standard_normal(3)
        errs = []
        for n in (65, 129):
            u = np.linspace(-1.0, 1.0, n)
            h = u[1] - u[0]
            f = sum(c * np.cos((k + 1) * np.pi * u) for k, c in enumerate(a))
            g = cumtrapz_matrix(n, h) @ (fd_matrix(n, h, 1, "outflow") @ f) + f[0]
            errs.append(np.abs(g - f).max())
        if not errs[1] <= errs[0] / 3.5:
            failures.append("duality")

    # empirical CDF monotonicity and range
    for _ in range(50):
        m = int(rng.integers(1, 500))
        grid = np.sort(rng.uniform(-2, 2, size=int(rng.integers(2, 40))))
        for X, g in ((rng.standard_normal(m), grid), (rng.standard_normal((m, 2)), (grid, grid[::2]))):
            E = empirical_cdf(X, g)
            v = E.values
            if v.min() < 0 or v.max() > 1 or any(np.any(np.diff(v, axis=k) < 0) for k in range(v.ndim)):
                failures.append("ecdf")

    report(9, not failures, "all property suites hold" if not failures else f"failed: {sorted(set(failures))}")

