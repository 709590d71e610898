"""Experiment driver: ``ttfde <command> [--config PATH] [flags]``.

All settings live in one JSON document. Built-in defaults are merged with
``--config`` and then with the command-line overrides; ``--print-config``
shows the result. Every run writes ``manifest.json`` next to its CSVs.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .burgers_hopf import (
    BurgersParams,
    GridSpec,
    assemble_cdf_operator,
    cdf_diagnostics,
    gaussian_cdf_ic,
    marginal_cdf,
)
from .gmres import GmresConfig, GmresNotConverged, accurate_norm
from .integrators import SCHEMES, StepConfig, StepFailure, integrate, richardson_local_error
from .mc_oracle import (
    EmpiricalCDF,
    batch_cdf,
    compare_cdf,
    ks_band,
    l2_noise_floor,
    sample_batch,
)
from .tt_core import TTShapeError, save_tt, tt_add, tt_random, tt_to_dense
from .tt_parallel import gather, par_truncate, partition, scatter
from .tt_round import RankCapExceeded, truncate

log = logging.getLogger("ttfde")

COMMANDS = ("order-study", "solve", "mc-benchmark", "compare", "trunc-bench")

DEFAULTS: dict = {
    "grid": {"N": 4, "points_per_dim": 64, "lo": -1.3, "hi": 1.3},
    # gamma and alpha are not published; these are the project defaults
    "params": {"gamma": 0.1, "alpha": 0.5, "sigma_ic": 0.25},
    "step": {
        "dt": 0.004,
        "scheme": "midpoint_explicit",
        "tol_coeff": 1.0,
        "max_rank": 10000,
        "clip_rank": False,
        "stabilization_coeff": 0.0,
        "gmres": {"rel_tol": 1e-8, "max_iters": 200, "restart": 30, "krylov_trunc_eps": None},
    },
    "T": 0.12,
    "snapshot_times": [0.0, 0.04, 0.08, 0.12],
    "workers": 1,
    "seed": 0,
    "output_dir": "runs",
    "order_study": {
        "N": 3,
        "points_per_dim": 32,
        "T": 1.0,
        "dt_exponents": [6, 7, 8, 9, 10, 11, 12],
        "schemes": list(SCHEMES),
        "tol_coeff": 1e-3,
        "gmres_rel_tol": 1e-12,
    },
    "mc": {
        "count": 100000,
        "dt_mc": 1e-3,
        # nodal resolution of the sampled Burgers system
        "resolution": 8,
        "spatial": "fd",
    },
    "compare": {
        "N_sweep": [2, 3, 4, 6],
        "time": 0.04,
        "solve_dir": "solve_N{N}",
        "benchmark_dir": "mc",
    },
    "trunc_bench": {
        "mode_sizes": [16, 16, 16, 16, 16],
        "ranks": [1, 12, 16, 16, 12, 1],
        "rel_eps": 1e-8,
        "workers": [1, 2, 4],
        "repeats": 3,
    },
}


class ValidationError(ValueError):
    """Bad configuration or missing inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, new: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if k not in out:
            raise ValidationError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ValidationError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ValidationError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def build_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(user, dict):
            raise ValidationError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, key, value)
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    if args.N is not None:
        cfg["grid"]["N"] = args.N
    if int(cfg["workers"]) < 1:
        raise ValidationError("workers must be at least 1")
    return cfg


def grid_of(cfg: dict, N: int | None = None) -> GridSpec:
    g = dict(cfg["grid"])
    if N is not None:
        g["N"] = N
    return GridSpec(int(g["N"]), int(g["points_per_dim"]), float(g["lo"]), float(g["hi"]))


def params_of(cfg: dict) -> BurgersParams:
    return BurgersParams(**cfg["params"])


def step_of(cfg: dict, **over) -> StepConfig:
    s = dict(cfg["step"])
    s.update(over)
    s["gmres"] = GmresConfig(**s["gmres"]) if isinstance(s["gmres"], dict) else s["gmres"]
    return StepConfig(workers=int(cfg["workers"]), **s)


def x_pi_index(N: int) -> int:
    """Node at ``x = pi`` (the nearest node below it when ``N`` is odd)."""
    return N // 2


# ---------------------------------------------------------------------------
# output helpers


def _versions() -> dict:
    return {
        "ttfde": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out: Path, command: str, cfg: dict, **extra) -> Path:
    doc = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "versions": _versions(),
        "written": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, default=_jsonable))
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _tlabel(t: float) -> str:
    return f"{t:.6g}"


def write_marginal_csv(path: Path, grids, values: np.ndarray, dims, t: float) -> None:
    """Grid coordinates then values; 2D tables in row-major order.

    Dimensions are named ``u_<node>`` with 1-based physical node numbers; the
    value column ``F_t=<time>`` carries the snapshot time.
    """
    values = np.asarray(values)
    header = [f"u_{d + 1}" for d in dims] + [f"F_t={_tlabel(t)}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        if values.ndim == 1:
            for u, v in zip(grids[0], values):
                w.writerow([repr(float(u)), repr(float(v))])
        else:
            for i, u in enumerate(grids[0]):
                for j, x in enumerate(grids[1]):
                    w.writerow([repr(float(u)), repr(float(x)), repr(float(values[i, j]))])


def read_marginal_csv(path: Path):
    """Inverse of ``write_marginal_csv``: ``(dims, time, grids, values)``."""
    if not path.exists():
        raise ValidationError(f"missing input {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    dims = tuple(int(h.split("_")[1]) - 1 for h in header[:-1])
    t = float(header[-1].split("=")[1])
    if len(dims) == 1:
        return dims, t, (body[:, 0],), body[:, 1]
    g0 = np.unique(body[:, 0])
    g1 = np.unique(body[:, 1])
    return dims, t, (g0, g1), body[:, 2].reshape(len(g0), len(g1))


def marginal_name(dims, t: float) -> str:
    tag = "_".join(str(d + 1) for d in dims)
    return f"marginal{len(dims)}d_u{tag}_t{_tlabel(t)}.csv"


# ---------------------------------------------------------------------------
# commands


def cmd_order_study(cfg: dict, out: Path) -> int:
    o = cfg["order_study"]
    grid = grid_of(cfg, int(o["N"]))
    grid = GridSpec(grid.N, int(o["points_per_dim"]), grid.lo, grid.hi)
    params = params_of(cfg)
    G = assemble_cdf_operator(grid, params)
    f0 = gaussian_cdf_ic(grid, params)
    dts = [float(o["T"]) * 2.0 ** -int(k) for k in o["dt_exponents"]]
    rows, slopes, failed = [], {}, False
    gm = dict(cfg["step"]["gmres"], rel_tol=float(o["gmres_rel_tol"]), krylov_trunc_eps=None)
    for scheme in o["schemes"]:
        errs = []
        for dt in dts:
            try:
                sc = step_of(cfg, scheme=scheme, dt=dt, tol_coeff=float(o["tol_coeff"]), gmres=gm,
                             stabilization_coeff=0.0)
                err, status = richardson_local_error(G, f0, sc), "ok"
            except (StepFailure, RankCapExceeded, FloatingPointError, np.linalg.LinAlgError) as exc:
                err, status, failed = float("nan"), f"failed: {exc}", True
            rows.append((scheme, dt, err, status))
            errs.append(err)
            log.info("%s dt=%.3e err=%.3e %s", scheme, dt, err, status)
        ok = [(d, e) for d, e in zip(dts, errs) if np.isfinite(e) and e > 0]
        if len(ok) >= 2:
            d, e = np.array(ok).T
            slopes[scheme] = float(np.polyfit(np.log(d), np.log(e), 1)[0])
        else:
            slopes[scheme] = float("nan")
    with open(out / "order_study.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "dt", "richardson_error", "status"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), r[3]])
    with open(out / "order_slopes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "order", "slope"])
        for s, v in slopes.items():
            w.writerow([s, StepConfig(dt=1.0, scheme=s).order, repr(v)])
    write_manifest(out, "order-study", cfg, slopes=slopes, operator_ranks=G.ranks,
                   partition=partition(grid.mode_sizes, cfg["workers"]).to_json(),
                   completed=not failed)
    for s, v in slopes.items():
        print(f"{s}: slope {v:.3f}")
    return 3 if failed else 0


def _solve_one(cfg: dict, out: Path, grid: GridSpec) -> tuple[int, dict]:
    params = params_of(cfg)
    sc = step_of(cfg)
    nu = sc.stabilization_coeff * sc.dt if sc.scheme.endswith("explicit") else 0.0
    G = assemble_cdf_operator(grid, params, numerical_diffusion=nu)
    f0 = gaussian_cdf_ic(grid, params)
    T = float(cfg["T"])
    telemetry = []
    tel_path = out / "telemetry.csv"
    fh = open(tel_path, "w", newline="")
    w = csv.writer(fh)
    w.writerow(["time", "max_rank", "step_eps", "gmres_iters", "wall_time_s"])

    def record(rec):
        row = [repr(rec.time), rec.max_rank, repr(rec.step_eps_used),
               "" if rec.gmres_iters is None else rec.gmres_iters, repr(rec.wall_time)]
        w.writerow(row)
        fh.flush()
        telemetry.append(rec)
        log.info("t=%.4f ranks=%s %.2fs", rec.time, rec.ranks, rec.wall_time)

    try:
        traj = integrate(G, f0, T, sc, cfg["snapshot_times"], callback=record)
    finally:
        fh.close()
    a, b = 0, x_pi_index(grid.N)
    outputs, diags = [], {}
    for t, F in traj.snapshots:
        save_tt(F, out / f"snapshot_t{_tlabel(t)}.ttv")
        m1 = marginal_cdf(F, [a])
        p1 = out / marginal_name((a,), t)
        write_marginal_csv(p1, (grid.u,), m1, (a,), t)
        outputs.append(p1.name)
        if grid.N > 1:
            m2 = marginal_cdf(F, [a, b])
            p2 = out / marginal_name((a, b), t)
            write_marginal_csv(p2, (grid.u, grid.u), m2, (a, b), t)
            outputs.append(p2.name)
        diags[_tlabel(t)] = cdf_diagnostics(F, [(a, b)] if grid.N > 1 else []).as_dict()
    info = {
        "completed": traj.completed,
        "error": traj.error,
        "operator_ranks": G.ranks,
        "numerical_diffusion": nu,
        "x_pi_node": b + 1,
        "snapshots": [t for t, _ in traj.snapshots],
        "max_rank": max((r.max_rank for r in telemetry), default=1),
        "diagnostics": diags,
        "outputs": outputs,
        "partition": partition(grid.mode_sizes, cfg["workers"]).to_json(),
    }
    write_manifest(out, "solve", cfg, **info)
    return (0 if traj.completed else 3), info


def cmd_solve(cfg: dict, out: Path) -> int:
    code, info = _solve_one(cfg, out, grid_of(cfg))
    if code:
        print(f"integration stopped early: {info['error']}", file=sys.stderr)
    else:
        print(f"solve finished; max rank {info['max_rank']}; outputs in {out}")
    return code


def cmd_mc_benchmark(cfg: dict, out: Path) -> int:
    mc = cfg["mc"]
    N = int(mc["resolution"])
    params = params_of(cfg)
    grid = grid_of(cfg, N)
    times = [float(t) for t in cfg["snapshot_times"]]
    t0 = time.perf_counter()
    batch = sample_batch(params, N, int(mc["count"]), int(cfg["seed"]), times,
                         float(mc["dt_mc"]), int(cfg["workers"]), mc["spatial"])
    a, b = 0, x_pi_index(N)
    outputs = []
    for s, t in enumerate(times):
        e1 = batch_cdf(batch, [a], grid.u, s)
        p1 = out / marginal_name((a,), t)
        write_marginal_csv(p1, e1.grid, e1.values, (a,), t)
        outputs.append(p1.name)
        if N > 1:
            e2 = batch_cdf(batch, [a, b], grid.u, s)
            p2 = out / marginal_name((a, b), t)
            write_marginal_csv(p2, e2.grid, e2.values, (a, b), t)
            outputs.append(p2.name)
    write_manifest(
        out, "mc-benchmark", cfg, count=batch.count, blowups=batch.blowups,
        resolution=N, dt_mc=batch.dt_mc, x_pi_node=b + 1, outputs=outputs,
        ks_band=ks_band(batch.count), wall_time_s=time.perf_counter() - t0,
    )
    print(f"benchmark: {batch.count} samples at N={N}, {batch.blowups} blow-ups; outputs in {out}")
    return 0


def cmd_compare(cfg: dict, out: Path, run_missing: bool = False) -> int:
    c = cfg["compare"]
    t = float(c["time"])
    bench_dir = out / c["benchmark_dir"]
    bench_file = bench_dir / marginal_name((0,), t)
    if not bench_file.exists() and run_missing:
        bench_dir.mkdir(parents=True, exist_ok=True)
        sub = copy.deepcopy(cfg)
        sub["snapshot_times"] = sorted({0.0, t})
        code = cmd_mc_benchmark(sub, bench_dir)
        if code:
            return code
    missing = [] if bench_file.exists() else [str(bench_file)]
    solve_files = {}
    for N in c["N_sweep"]:
        d = out / c["solve_dir"].format(N=N)
        f = d / marginal_name((0,), t)
        if not f.exists() and run_missing:
            d.mkdir(parents=True, exist_ok=True)
            sub = copy.deepcopy(cfg)
            sub["grid"]["N"] = int(N)
            sub["T"] = t
            sub["snapshot_times"] = [t]
            code, info = _solve_one(sub, d, grid_of(sub))
            if code:
                print(f"solve for N={N} failed: {info['error']}", file=sys.stderr)
                return code
        if not f.exists():
            missing.append(str(f))
        solve_files[int(N)] = f
    if missing:
        raise ValidationError("missing inputs: " + ", ".join(missing))
    _, bt, bgrids, bvals = read_marginal_csv(bench_file)
    bench_manifest = json.loads((bench_dir / "manifest.json").read_text())
    count = int(bench_manifest["count"])
    bench = EmpiricalCDF(1, bgrids, bvals, bt, (0,), count)
    floor = l2_noise_floor(bench)
    rows = []
    for N, f in solve_files.items():
        _, st, sgrids, svals = read_marginal_csv(f)
        if not np.allclose(sgrids[0], bgrids[0], rtol=0, atol=1e-12):
            raise ValidationError(f"grid of {f} does not match the benchmark grid")
        l2, linf = compare_cdf(svals, bench)
        rows.append((N, l2, linf, st))
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "L2_error", "Linf_error", "time", "ks_band", "l2_noise_floor"])
        for N, l2, linf, st in rows:
            w.writerow([N, repr(l2), repr(linf), repr(st), repr(ks_band(count)), repr(floor)])
    write_manifest(out, "compare", cfg, rows=rows, benchmark_count=count,
                   benchmark_resolution=bench_manifest.get("resolution"))
    for N, l2, linf, _ in rows:
        print(f"N={N}: L2 {l2:.4e}  Linf {linf:.4e}")
    return 0


def cmd_trunc_bench(cfg: dict, out: Path) -> int:
    tb = cfg["trunc_bench"]
    rng = np.random.default_rng(int(cfg["seed"]))
    a = tt_random(tb["mode_sizes"], tb["ranks"], rng)
    f = tt_add(a, a)
    eps = float(tb["rel_eps"]) * accurate_norm(f)
    reps = int(tb["repeats"])

    def timed(fn):
        best, res = np.inf, None
        for _ in range(reps):
            t0 = time.perf_counter()
            res = fn()
            best = min(best, time.perf_counter() - t0)
        return best, res

    t_ser, (g_ser, _) = timed(lambda: truncate(f, eps))
    ref = tt_to_dense(g_ser) if np.prod(f.mode_sizes) <= 10**7 else None
    rows = [("serial", 1, t_ser, 0.0, g_ser.ranks)]
    worst = 0.0
    parts = {}
    for P in tb["workers"]:
        part = partition(f.mode_sizes, int(P))
        parts[str(P)] = part.to_json()
        dist = scatter(f, part)
        t_par, (gd, _) = timed(lambda: par_truncate(dist, eps))
        g = gather(gd)
        if ref is not None:
            diff = float(np.linalg.norm(tt_to_dense(g) - ref) / np.linalg.norm(ref))
        else:
            diff = float("nan")
        worst = max(worst, diff) if np.isfinite(diff) else worst
        rows.append(("parallel", int(P), t_par, diff, g.ranks))
    with open(out / "trunc_bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "P", "wall_time_s", "rel_diff_vs_serial", "ranks"])
        for v, P, t, d, r in rows:
            w.writerow([v, P, repr(t), repr(d), " ".join(map(str, r))])
    write_manifest(out, "trunc-bench", cfg, partition=parts, input_ranks=f.ranks,
                   worst_rel_diff=worst)
    for v, P, t, d, r in rows:
        print(f"{v:8s} P={P}: {t:.4f}s  diff {d:.2e}  ranks {r}")
    if worst > 1e-10:
        print(f"parallel results differ from serial by {worst:.2e}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttfde", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="JSON config merged over the defaults")
    p.add_argument("--workers", type=int, metavar="P", help="worker count")
    p.add_argument("--seed", type=int, metavar="S", help="random seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--N", type=int, help="number of physical nodes (grid.N)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. --set step.dt=0.002 (repeatable)")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--run-missing", action="store_true",
                   help="compare: run the solves and benchmark that are missing")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("ttfde: a command is required", file=sys.stderr)
            return 2
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "order-study":
            return cmd_order_study(cfg, out)
        if args.command == "solve":
            return cmd_solve(cfg, out)
        if args.command == "mc-benchmark":
            return cmd_mc_benchmark(cfg, out)
        if args.command == "compare":
            return cmd_compare(cfg, out, args.run_missing)
        return cmd_trunc_bench(cfg, out)
    except (StepFailure, GmresNotConverged, RankCapExceeded, FloatingPointError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"ttfde: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, TTShapeError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"ttfde: invalid input: {exc}", file=sys.stderr)
        return 2

if __name__ == "__main__":
    sys.exit(main())
