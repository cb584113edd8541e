"""Command-line entry point: ``switchpde <command> --problem FILE ...``.

Commands: validate, solve-pde, solve-mc, oracle, compare, picard-diag.
Exit status is 0 when every check passed, 1 when a check failed, 2 for
bad input and 3 for solver errors; failures print one line
``error: CODE: text`` on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import oracle as orc
from .export import emit_surface_csv, write_convergence_log, write_json, write_table
from .fd import Grid, MonotonicityError, ObstacleSweepError, SchemeOptions, apply_theta_map, residual_report, zero_field
from .picard import alpha_star, contraction_probe, picard_alpha, picard_solve, slab_width
from .problem import (
    ProblemFileError,
    ValidationReport,
    check_non_free_loop,
    check_terminal_consistency,
    load_problem,
)

COMMANDS = ("validate", "solve-pde", "solve-mc", "oracle", "compare", "picard-diag")


class CliError(Exception):
    def __init__(self, code: str, text: str, status: int):
        self.code, self.text, self.status = code, text, status
        super().__init__(f"{code}: {text}")


class CheckFailed(CliError):
    def __init__(self, code, text):
        super().__init__(code, text, 1)


def _usage(text):
    return CliError("BAD_ARGUMENT", text, 2)


# --------------------------------------------------------------------------- argument parsing


def parse_grid(text: str):
    """'NxM' or 'NxM1xM2' -> (N, (M1[, M2])): N time steps, M space intervals."""
    parts = text.lower().split("x")
    try:
        nums = [int(s) for s in parts]
    except ValueError:
        raise _usage(f"grid {text!r} is not of the form NxM") from None
    if len(nums) < 2 or len(nums) > 3 or min(nums) < 2:
        raise _usage(f"grid {text!r}: need N>=2 time steps and M>=2 intervals per axis (NxM or NxM1xM2)")
    return nums[0], tuple(nums[1:])


def parse_box(text: str):
    box = []
    for part in text.split(","):
        try:
            lo, hi = (float(v) for v in part.split(":"))
        except ValueError:
            raise _usage(f"box {text!r} is not of the form lo:hi[,lo:hi]") from None
        if not hi > lo:
            raise _usage(f"box interval {part!r} is empty")
        box.append((lo, hi))
    return box


def parse_floats(text: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise _usage(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="switchpde", description="Optimal switching PDE systems: solve, validate, cross-check.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--problem", required=True, help="problem file")
    ap.add_argument("--grid", default="100x100", help="NxM[xM2]: time steps x space intervals per axis")
    ap.add_argument("--box", default=None, help="lo:hi[,lo:hi] spatial box (default -4:4 per axis; write --box=-4:4)")
    ap.add_argument("--x0", default=None, help="evaluation point, comma-separated (default origin)")
    ap.add_argument("--tol", type=float, default=1e-6, help="Picard stopping tolerance in the weighted norm")
    ap.add_argument("--alpha", default=None, help="norm weight (solve-pde) or comma-separated sweep (picard-diag)")
    ap.add_argument("--seed", type=int, default=0, help="master seed")
    ap.add_argument("--paths", type=int, default=10000, help="Monte Carlo paths")
    ap.add_argument("--degree", type=int, default=3, help="regression polynomial degree")
    ap.add_argument("--max-iter", type=int, default=50, help="Picard iteration cap")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--threads", type=int, default=1, help="worker cap for numerical libraries")
    ap.add_argument("--theta", type=float, default=1.0, help="theta-scheme weight (1 = implicit)")
    ap.add_argument("--boundary", default="linear_extrapolation", choices=("linear_extrapolation", "dirichlet_from_terminal"))
    ap.add_argument("--lattice-steps", type=int, default=None, help="lattice time steps (default: grid N)")
    ap.add_argument("--bootstrap", type=int, default=20, help="bootstrap replicates for Monte Carlo errors")
    ap.add_argument("--diff-tol", type=float, default=None, help="compare: fail when a |difference| exceeds this")
    ap.add_argument("--export-paths", action="store_true", help="solve-mc: also write the simulated paths")
    return ap


# --------------------------------------------------------------------------- run context


class Run:
    def __init__(self, args):
        self.args = args
        if not args.tol > 0:
            raise _usage("--tol must be positive")
        if args.threads < 1:
            raise _usage("--threads must be >= 1")
        if args.paths < 2:
            raise _usage("--paths must be >= 2")
        try:
            self.problem_text = Path(args.problem).read_text()
        except OSError as exc:
            raise CliError("IO_ERROR", f"cannot read problem file: {exc}", 2) from None
        try:
            self.p = load_problem(args.problem)
        except ProblemFileError as exc:
            raise CliError("PROBLEM_PARSE", str(exc), 2) from None
        p = self.p
        self.N, intervals = parse_grid(args.grid)
        if len(intervals) == 1:
            intervals = intervals * p.k
        if len(intervals) != p.k:
            raise _usage(f"grid has {len(intervals)} space axes, problem has k={p.k}")
        self.nodes = tuple(i + 1 for i in intervals)
        box = parse_box(args.box) if args.box else [(-4.0, 4.0)]
        if len(box) == 1:
            box = box * p.k
        if len(box) != p.k:
            raise _usage(f"box has {len(box)} intervals, problem has k={p.k}")
        self.box = box
        x0 = parse_floats(args.x0) if args.x0 else [0.0] * p.k
        if len(x0) != p.k:
            raise _usage(f"--x0 needs {p.k} coordinates")
        self.x0 = np.array(x0)
        try:
            self.opts = SchemeOptions(theta=args.theta, boundary=args.boundary)
            self.grid = Grid.for_problem(p, self.N, box, self.nodes) if p.k <= 2 else None
        except ValueError as exc:
            raise _usage(str(exc)) from None
        self.out = Path(args.out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError("IO_ERROR", f"output directory not writable: {exc}", 2) from None
        self.start = time.perf_counter()
        self.results = {}

    def need_grid(self):
        if self.grid is None:
            raise _usage("finite differences support k <= 2")
        if not self.grid.contains_interior(self.x0):
            raise _usage("x0 must lie inside the box")
        return self.grid

    def manifest(self, status: int):
        a = self.args
        config = {k: v for k, v in sorted(vars(a).items()) if k != "threads"}
        versions = {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}
        try:
            versions["switchpde"] = metadata.version("artifact")
        except metadata.PackageNotFoundError:
            versions["switchpde"] = "unknown"
        return {
            "command": a.command,
            "config": config,
            "problem_sha256": hashlib.sha256(self.problem_text.encode()).hexdigest(),
            "seed": a.seed,
            "threads": a.threads,
            "versions": versions,
            "exit_status": status,
            "wall_time": round(time.perf_counter() - self.start, 6),
        }


def _fmt(v):
    return "n/a" if v is None else f"{v:.6g}"


# --------------------------------------------------------------------------- commands


def _validation_samples(run: Run):
    p = run.p
    times = np.linspace(0.0, p.T, 5)
    axes = [np.linspace(lo, hi, 9) for lo, hi in run.box]
    pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    return [(t, x) for t in times for x in pts], pts


def cmd_validate(run: Run) -> int:
    p = run.p
    tx, xs = _validation_samples(run)
    try:
        reports = [check_non_free_loop(p, tx), check_terminal_consistency(p, xs)]
    except (ArithmeticError, ValueError) as exc:
        raise CliError("EVALUATION", str(exc), 3) from None
    (run.out / "validation.txt").write_text("\n".join(r.to_text() for r in reports))
    rows = ["check,t,x,witness,slack"]
    for r in reports:
        rows += r.to_records().splitlines()[1:]
    (run.out / "validation.csv").write_text("\n".join(rows) + "\n")
    for r in reports:
        print(f"{r.name}: {'pass' if r.passed else 'FAIL'} ({r.checked} checks, {len(r.violations)} violations)")
    failed = [r for r in reports if not r.passed]
    run.results["validation"] = {r.name: {"passed": r.passed, "violations": len(r.violations), "min_slack": r.min_slack} for r in reports}
    if failed:
        v = failed[0].violations[0]
        raise CheckFailed(
            "VALIDATION_FAILED", f"{v.check} witness {'-'.join(map(str, v.witness))} slack {v.slack:.6g} at t={v.t} x={list(v.x)}"
        )
    return 0


def _solve_pde(run: Run):
    g = run.need_grid()
    alpha = None
    if run.args.alpha is not None:
        vals = parse_floats(run.args.alpha)
        if len(vals) != 1 or not vals[0] > 0:
            raise _usage("--alpha must be one positive number for solve-pde")
        alpha = vals[0]
    fld, state = picard_solve(run.p, g, run.opts, run.args.tol, run.args.max_iter, alpha=alpha)
    return fld, state


def cmd_solve_pde(run: Run) -> int:
    p = run.p
    fld, state = _solve_pde(run)
    g = fld.grid
    emit_surface_csv(fld, run.out / "surface")
    write_convergence_log(run.out / "convergence.csv", state.log_records())
    res = residual_report(p, g, fld, run.opts)
    values = [fld.at(i, run.x0) for i in range(p.m)]
    active0 = [int(a) for a in (_active_at(fld, g, run.x0))]
    summary = {
        "values_at_x0": values,
        "x0": run.x0.tolist(),
        "active_obstacle_at_x0": active0,
        "converged": state.converged,
        "iterations": state.iteration,
        "alpha": state.alpha,
        "tol": state.tol,
        "final_alpha_distance": state.distance_history[-1],
        "final_inf_distance": state.inf_history[-1],
        "distance_history": state.distance_history,
        "measured_ratios": state.measured_ratios,
        "max_inner_sweeps": fld.max_inner_sweeps,
        "residuals": res,
    }
    write_json(run.out / "summary.json", summary)
    run.results["summary"] = summary
    for i, v in enumerate(values):
        print(f"mode {i + 1}: u(0, x0) = {v:.10g}")
    print(f"picard: {state.iteration} iterations, converged={state.converged}, last distance {state.distance_history[-1]:.3g}")
    if not state.converged:
        hist = ", ".join(f"{d:.3g}" for d in state.distance_history)
        raise CheckFailed("NOT_CONVERGED", f"no convergence in {state.iteration} iterations; distances {hist}")
    worst = max(res["obstacle_violation"]["max"])
    if worst > run.opts.obstacle_tolerance:
        raise CheckFailed("OBSTACLE_VIOLATION", f"obstacle violated by {worst:.3g} > {run.opts.obstacle_tolerance}")
    return 0


def _active_at(fld, g, x0):
    idx = int(np.argmin(np.sum((g.points - x0) ** 2, axis=1)))
    return fld.active_obstacle[:, 0, idx]


def _lattice_values(run: Run, steps):
    p = run.p
    if p.k != 1:
        return None, "lattice needs k=1"
    if p.driver_uses("z"):
        return None, "z-dependent driver"
    lat = orc.build_lattice(p, 0.0, float(run.x0[0]), steps)
    if p.driver_uses("y"):
        res, its, ok = orc.lattice_picard(p, lat)
        if not ok:
            raise CheckFailed("NOT_CONVERGED", f"lattice fixed point did not converge in {its} iterations")
        return (lat, res), None
    return (lat, orc.lattice_dp(p, lat)), None


def cmd_oracle(run: Run) -> int:
    p = run.p
    steps = run.args.lattice_steps or run.N
    got, why = _lattice_values(run, steps)
    if got is None:
        raise _usage(f"lattice oracle unavailable: {why}")
    lat, res = got
    out = {"lattice_steps": steps, "dx": lat.dx, "x0": run.x0.tolist(), "modes": []}
    for i in range(p.m):
        entry = {"mode": i + 1, "lattice_value": float(res.root[i])}
        if not p.driver_uses("y"):
            try:
                v, best = orc.enumerate_strategies(p, lat, i + 1)
                entry["enumeration"] = orc.oracle_summary(v, best)
            except orc.EnumerationGuardError as exc:
                entry["enumeration"] = {"skipped": str(exc)}
        out["modes"].append(entry)
        enum = entry.get("enumeration", {}).get("value")
        print(f"mode {i + 1}: lattice {res.root[i]:.10g}  enumeration {_fmt(enum)}")
    out["residuals"] = res.residuals(p)
    write_json(run.out / "oracle.json", out)
    run.results["oracle"] = out
    if out["residuals"]["obstacle_violation"] > 1e-9:
        raise CheckFailed("OBSTACLE_VIOLATION", f"lattice obstacle violated by {out['residuals']['obstacle_violation']:.3g}")
    return 0


def _mc(run: Run):
    p = run.p
    paths = orc.euler_paths(p, 0.0, run.x0, run.N, run.args.paths, run.args.seed)
    res = orc.lsmc_solve(p, paths, run.args.degree, bootstrap=run.args.bootstrap, seed=run.args.seed)
    return paths, res


def cmd_solve_mc(run: Run) -> int:
    paths, res = _mc(run)
    summary = res.summary()
    summary.update({"seed": run.args.seed, "steps": run.N, "x0": run.x0.tolist()})
    write_json(run.out / "mc.json", summary)
    if run.args.export_paths:
        (run.out / "paths.csv").write_text(paths.to_text())
    run.results["mc"] = summary
    for i, (v, s) in enumerate(zip(res.values, res.std_errors)):
        print(f"mode {i + 1}: {v:.10g} +- {s:.3g}")
    if res.low_confidence:
        raise CheckFailed("LOW_CONFIDENCE", f"bootstrap standard error above cap {res.se_cap}")
    return 0


def cmd_compare(run: Run) -> int:
    p = run.p
    fld, state = _solve_pde(run)
    if not state.converged:
        raise CheckFailed("NOT_CONVERGED", f"PDE solve did not converge in {state.iteration} iterations")
    pde = [fld.at(i, run.x0) for i in range(p.m)]
    got, why = _lattice_values(run, run.args.lattice_steps or run.N)
    lat = [float(v) for v in got[1].root] if got else [None] * p.m
    _, mc = _mc(run)
    rows, worst = [], 0.0
    header = ["mode", "pde", "lattice", "mc", "mc_se", "abs_pde_lattice", "abs_pde_mc", "abs_lattice_mc"]

    def diff(a, b):
        return None if a is None or b is None else abs(a - b)

    for i in range(p.m):
        row = [i + 1, pde[i], lat[i], float(mc.values[i]), float(mc.std_errors[i])]
        row += [diff(pde[i], lat[i]), diff(pde[i], row[3]), diff(lat[i], row[3])]
        rows.append(row)
        worst = max([worst] + [d for d in row[5:] if d is not None])
    write_table(run.out / "compare.csv", header, rows)
    write_json(run.out / "summary.json", {"header": header, "rows": rows, "lattice_note": why, "picard_iterations": state.iteration})
    print("  ".join(f"{h:>15}" for h in header))
    for r in rows:
        print("  ".join(f"{(str(v) if isinstance(v, int) else _fmt(v)):>15}" for v in r))
    if run.args.diff_tol is not None and worst > run.args.diff_tol:
        raise CheckFailed("DIFF_TOO_LARGE", f"largest difference {worst:.3g} exceeds {run.args.diff_tol}")
    return 0


def cmd_picard_diag(run: Run) -> int:
    p = run.p
    g = run.need_grid()
    C, T, m = p.lipschitz_const, p.T, p.m
    alpha0, _ = alpha_star(C, T, m)
    if run.args.alpha is not None:
        alphas = parse_floats(run.args.alpha)
    else:
        base = picard_alpha(p)
        alphas = [base * s for s in (0.25, 0.5, 1.0, 2.0, 4.0)]
    if any(not a >= 0 for a in alphas):
        raise _usage("alpha values must be nonnegative")
    rng = np.random.default_rng(run.args.seed)
    shape = (m, g.time_steps + 1, g.n_nodes)
    gamma_a = rng.uniform(-1.0, 1.0, size=shape)
    gamma_b = apply_theta_map(p, g, zero_field(p, g), run.opts).values
    rows = []
    for a in alphas:
        ratio = contraction_probe(p, g, run.opts, gamma_a, gamma_b, a)
        bound = math.sqrt(2 * C * T * m / a) if a > 0 else (0.0 if C == 0 else math.inf)
        rows.append([a, ratio, bound])
        print(f"alpha {a:.6g}: ratio {ratio:.6g}  bound {bound:.6g}")
    write_table(run.out / "picard_diag.csv", ["alpha", "measured_ratio", "bound"], rows)
    diag = {"alpha0": alpha0, "lipschitz": C, "slab_width": slab_width(C, m) if C > 0 else None, "rows": rows}
    write_json(run.out / "summary.json", diag)
    run.results["diag"] = diag
    return 0


HANDLERS = {
    "validate": cmd_validate,
    "solve-pde": cmd_solve_pde,
    "solve-mc": cmd_solve_mc,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
    "picard-diag": cmd_picard_diag,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run_ctx = None
    status, err = 0, None
    try:
        with threadpool_limits(limits=args.threads):
            run_ctx = Run(args)
            status = HANDLERS[args.command](run_ctx)
    except CliError as exc:
        status, err = exc.status, exc
    except ProblemFileError as exc:
        status, err = 2, CliError("PROBLEM_PARSE", str(exc), 2)
    except MonotonicityError as exc:
        status, err = 3, CliError("MONOTONICITY", str(exc), 3)
    except ObstacleSweepError as exc:
        status, err = 3, CliError("OBSTACLE_SWEEP", str(exc), 3)
    except orc.LatticeError as exc:
        status, err = 3, CliError("LATTICE", str(exc), 3)
    except orc.EnumerationGuardError as exc:
        status, err = 3, CliError("ENUMERATION_GUARD", str(exc), 3)
    except orc.RankDeficiencyError as exc:
        status, err = 3, CliError("RANK_DEFICIENT", str(exc), 3)
    except (ArithmeticError, ValueError) as exc:
        status, err = 3, CliError("SOLVER_ERROR", str(exc), 3)
    if run_ctx is not None:
        write_json(run_ctx.out / "manifest.json", run_ctx.manifest(status))
    if err is not None:
        print(f"error: {err.code}: {' '.join(err.text.split())}", file=sys.stderr)
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
