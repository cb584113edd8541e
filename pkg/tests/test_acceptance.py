"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in the terminal summary.
"""
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from switchpde.cli import run as cli_run
from switchpde.expr import BinOp
from switchpde.fd import Grid, SchemeOptions, residual_report
from switchpde.oracle import (
    Strategy,
    build_lattice,
    enumerate_strategies,
    euler_paths,
    lattice_dp,
    lsmc_solve,
)
from switchpde.picard import (
    alpha_star,
    comparison_harness,
    contraction_probe,
    dominating_bound,
    picard_solve,
)
from switchpde.problem import (
    ProbeBox,
    build_problem,
    check_non_free_loop,
    check_terminal_consistency,
    estimate_lipschitz,
    load_problem,
)

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"
BOX = (-3.0, 3.0)


def _r(v):
    return repr(float(v))


# --------------------------------------------------------------------------- instance generators


def switching_instance(rng, m):
    """Small z-independent H2/H3-valid instance for lattice vs enumeration.

    Either sigma > 0 with time-only drivers and costs and terminals phi(x) + a_i
    (deterministic switch times are then optimal), or sigma = 0 with general
    (t, x) dependence on a single lattice path.
    """
    a = rng.uniform(-0.5, 0.5, size=m)
    if rng.random() < 0.5:
        phi = rng.choice(["sin(x1)", "x1^2/(1 + x1^2)", "0.5*x1"])
        drivers = tuple(f"{_r(rng.uniform(-1, 1))} + {_r(rng.uniform(-1, 1))}*t" for _ in range(m))
        costs = tuple(
            tuple(
                "0" if i == j else f"{_r(abs(a[i] - a[j]) + rng.uniform(0.02, 0.4))} + {_r(rng.uniform(0, 0.2))}*t"
                for j in range(m)
            )
            for i in range(m)
        )
        terminals = tuple(f"{phi} + {_r(a[i])}" for i in range(m))
        p = build_problem(
            drift=(f"{_r(rng.uniform(-0.3, 0.3))}",),
            diffusion=((f"{_r(rng.uniform(0.5, 1.5))}",),),
            drivers=drivers,
            costs=costs,
            terminals=terminals,
        )
        return p
    s = rng.uniform(-0.2, 0.2, size=m)
    drivers = tuple(
        f"{_r(rng.uniform(-1, 1))} + {_r(rng.uniform(-1, 1))}*t + {_r(rng.uniform(-1, 1))}*sin(x1)" for _ in range(m)
    )
    costs = tuple(
        tuple(
            "0"
            if i == j
            else f"{_r(abs(a[i] - a[j]) + abs(s[i]) + abs(s[j]) + rng.uniform(0.02, 0.3))} + {_r(rng.uniform(0, 0.3))}*x1^2"
            for j in range(m)
        )
        for i in range(m)
    )
    terminals = tuple(f"{_r(a[i])} + {_r(s[i])}*cos(x1)" for i in range(m))
    b = rng.choice([0.0, rng.uniform(0.2, 1.0)])
    p = build_problem(drift=(_r(b),), diffusion=(("0",),), drivers=drivers, costs=costs, terminals=terminals)
    return p


def lipschitz_instance(rng, m=None, cooperative=False, z_scale=0.3):
    """Random Lipschitz driver system on one state dimension; the declared
    constant is the measured one."""
    m = int(rng.integers(1, 4)) if m is None else m
    a = rng.uniform(-0.2, 0.2, size=m)
    drivers = []
    for i in range(m):
        terms = []
        for j in range(m):
            lo = 0.0 if (cooperative and j != i) else -0.6
            terms.append(f"{_r(rng.uniform(lo, 0.6))}*y{j + 1}")
        if not cooperative:
            terms.append(f"{_r(rng.uniform(-0.4, 0.4))}*sin(y{i + 1})")
        terms.append(f"{_r(rng.uniform(-z_scale, z_scale))}*z1")
        terms.append(f"{_r(rng.uniform(-1, 1))}*sin(x1) + {_r(rng.uniform(-0.5, 0.5))}")
        drivers.append(" + ".join(terms))
    costs = tuple(
        tuple("0" if i == j else _r(abs(a[i] - a[j]) + rng.uniform(0.15, 0.5)) for j in range(m)) for i in range(m)
    )
    terminals = tuple(f"0.3*cos(x1) + {_r(a[i])}" for i in range(m))
    p = build_problem(
        drift=(f"{_r(rng.uniform(-0.3, 0.3))} - 0.1*x1",),
        diffusion=((_r(rng.uniform(0.4, 1.0)),),),
        drivers=tuple(drivers),
        costs=costs,
        terminals=terminals,
        lipschitz=1.0,
    )
    C = estimate_lipschitz(p, ProbeBox(x=(BOX,)), n_probes=2000, seed=int(rng.integers(2**31)))
    return p.replace(lipschitz_const=float(C))


def fd_grid(p, N=40, nodes=61):
    return Grid.for_problem(p, N, [BOX], (nodes,))


def _samples(p, box=(-4.0, 4.0)):
    xs = [[x] for x in np.linspace(*box, 9)]
    return [(t, x) for t in np.linspace(0, p.T, 5) for x in xs], xs


# --------------------------------------------------------------------------- criteria


def test_criterion_01_validators(record):
    start = time.perf_counter()
    outcomes = []
    expected = {
        "zero_cost_loop": ("free_loop", (1, 2, 1), 0.0),
        "terminal_inconsistent": ("terminal_inconsistent", (2, 1), -4.0),
        "negative_cost": ("negative_cost", (1, 2), -0.5),
    }
    for name, (check, witness, slack) in expected.items():
        p = load_problem(PROBLEMS / f"{name}.prob")
        tx, xs = _samples(p)
        viol = check_non_free_loop(p, tx).violations + check_terminal_consistency(p, xs).violations
        outcomes.append(bool(viol) and all((v.check, v.witness, v.slack) == (check, witness, slack) for v in viol))
    for name in ("two_mode", "heat", "linear_bsde"):
        p = load_problem(PROBLEMS / f"{name}.prob")
        tx, xs = _samples(p)
        outcomes.append(check_non_free_loop(p, tx).passed and check_terminal_consistency(p, xs).passed)
    elapsed = time.perf_counter() - start
    ok = all(outcomes) and elapsed < 1.0
    record(1, ok, f"3 planted failures rejected with witness, 3 valid accepted: {outcomes}; {elapsed:.3f}s (< 1 s)")
    assert ok


def heat_error(time_steps, intervals, box=(-4.0, 4.0)):
    p = load_problem(PROBLEMS / "heat.prob")
    g = Grid.for_problem(p, time_steps, [box], (intervals + 1,))
    fld, st = picard_solve(p, g)
    assert st.converged
    return abs(fld.at(0, [0.0]) - 1.0)


def test_criterion_02_heat_reduction(record):
    start = time.perf_counter()
    err = heat_error(200, 200)
    elapsed = time.perf_counter() - start
    ok = err <= 5e-3 and elapsed < 10.0
    record(2, ok, f"|u(0,0) - 1| = {err:.3e} (<= 5e-3), {elapsed:.2f}s (< 10 s)")
    assert ok


def test_criterion_03_linear_bsde(record):
    p = load_problem(PROBLEMS / "linear_bsde.prob")
    g = Grid.for_problem(p, 200, [(-4.0, 4.0)], (201,))
    fld, st = picard_solve(p, g)
    pde = fld.at(0, [0.0])
    paths = euler_paths(p, 0.0, [0.0], 20, 100_000, 2024)
    mc = lsmc_solve(p, paths, degree=3, bootstrap=20)
    diff = abs(pde - mc.values[0])
    ok = st.converged and abs(pde - 1.0) <= 1e-2 and diff <= 3 * mc.std_errors[0]
    record(
        3,
        ok,
        f"PDE |u(0,0) - 1| = {abs(pde - 1):.3e} (<= 1e-2); LSMC {mc.values[0]:.5f} +- {mc.std_errors[0]:.5f}, "
        f"|PDE - LSMC| = {diff:.2e} (<= 3 SE = {3 * mc.std_errors[0]:.2e})",
    )
    assert ok


def test_criterion_04_two_mode_oracles(record):
    p = load_problem(PROBLEMS / "two_mode.prob")
    # dt = 1/8, dx = 1/2: branch probabilities 1/4, 1/2, 1/4 keep the arithmetic exact
    lat = build_lattice(p, 0.0, 0.0, 8, dx=0.5)
    dp = lattice_dp(p, lat).root.tolist()
    e1 = enumerate_strategies(p, lat, 1)
    e2 = enumerate_strategies(p, lat, 2)
    g = Grid.for_problem(p, 100, [(-4.0, 4.0)], (101,))
    fld, st = picard_solve(p, g)
    pde = [fld.at(0, [0.0]), fld.at(1, [0.0])]
    active = int(fld.active_obstacle[1, 0, 50])
    checks = [
        dp == [1.0, 0.5],
        (e1[0], e2[0]) == (1.0, 0.5),
        e1[1] == Strategy(1) and e2[1] == Strategy(2, ((0, 1),)),
        st.converged and abs(pde[0] - 1.0) <= 2e-2 and abs(pde[1] - 0.5) <= 2e-2,
        active == 1,
    ]
    record(
        4,
        all(checks),
        f"lattice {dp}, enumeration ({e1[0]}, {e2[0]}) best {e1[1].as_list()} / {e2[1].as_list()}, "
        f"PDE ({pde[0]:.6f}, {pde[1]:.6f}) within 2e-2, active_obstacle mode 2 at t=0: {active}",
    )
    assert all(checks)


def test_criterion_05_dp_equals_enumeration(record):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    mismatches, total, worst = 0, 0, 0.0
    for _ in range(50):
        m = int(rng.integers(1, 4))
        N = int(rng.integers(1, 7))
        p = switching_instance(rng, m)
        tx, xs = _samples(p)
        assert check_non_free_loop(p, tx).passed and check_terminal_consistency(p, xs).passed
        lat = build_lattice(p, 0.0, float(rng.uniform(-0.5, 0.5)), N)
        dp = lattice_dp(p, lat).root
        for i0 in range(1, m + 1):
            v, _ = enumerate_strategies(p, lat, i0)
            total += 1
            worst = max(worst, abs(v - dp[i0 - 1]))
            mismatches += v != dp[i0 - 1]
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60.0
    record(5, ok, f"50 instances, {total} root values, {mismatches} mismatches, max |diff| = {worst!r}; {elapsed:.1f}s (< 60 s)")
    assert ok


@pytest.fixture(scope="module")
def lipschitz_runs():
    rng = np.random.default_rng(6)
    runs = []
    for _ in range(20):
        p = lipschitz_instance(rng)
        g = fd_grid(p)
        fld, st = picard_solve(p, g, tol=1e-6, max_iter=200)
        runs.append((p, g, fld, st, rng.integers(2**31)))
    return runs


def test_criterion_06_contraction(record, lipschitz_runs):
    bound = math.sqrt(0.5) + 0.05
    ratios, decreasing = [], []
    for p, g, fld, st, seed in lipschitz_runs:
        alpha0, _ = alpha_star(p.lipschitz_const, p.T, p.m)
        rng = np.random.default_rng(int(seed))
        shape = fld.values.shape
        ga, gb = rng.uniform(-1, 1, size=shape), rng.uniform(-1, 1, size=shape)
        ratios.append(contraction_probe(p, g, SchemeOptions(), ga, gb, alpha0))
        tail = [r for d, r in zip(st.distance_history[1:], st.measured_ratios) if d > 1e-13]
        decreasing.append(st.converged and all(r < 1 for r in tail[len(tail) // 2 :]))
    good = sum(r <= bound for r in ratios)
    ok = good >= 19 and all(decreasing)
    record(
        6,
        ok,
        f"ratio <= {bound:.4f} in {good}/20 (need 19), max ratio {max(ratios):.3f}; "
        f"distance histories eventually decreasing: {sum(decreasing)}/20",
    )
    assert ok


def test_criterion_07_iteration_counts(record, lipschitz_runs):
    rng = np.random.default_rng(7)
    exact_two = []
    for _ in range(5):
        p = switching_instance(rng, int(rng.integers(1, 4)))
        _, st = picard_solve(p, fd_grid(p), tol=1e-6)
        exact_two.append(st.converged and st.iteration == 2)
    within = []
    for p, g, fld, st, _ in lipschitz_runs:
        d1 = st.distance_history[0]
        budget = math.ceil(math.log(1e-6 / d1) / math.log(0.71)) + 2
        within.append(st.converged and st.iteration <= budget)
    ok = all(exact_two) and all(within)
    record(7, ok, f"C=0: exactly 2 iterations in {sum(exact_two)}/5; generic: within geometric budget in {sum(within)}/20")
    assert ok


def test_criterion_08_growth_bound(record):
    rng = np.random.default_rng(8)
    excess = []
    for _ in range(10):
        p = lipschitz_instance(rng)
        N = max(40, math.ceil(2 * p.m**2 * p.lipschitz_const * p.T) + 1)
        g = fd_grid(p, N)
        fld, st = picard_solve(p, g, tol=1e-8, max_iter=200)
        assert st.converged
        excess.append(dominating_bound(p, g).excess(fld))
    ok = max(excess) <= 1e-2
    record(8, ok, f"max_i max_nodes (|u^i| - v) over 10 instances = {max(excess):.3e} (<= 1e-2)")
    assert ok


def _dominating_pair(rng):
    low = lipschitz_instance(rng, cooperative=True)
    m = low.m
    bump = [f"{_r(rng.uniform(0, 0.5))}*(1 + sin(x1))" for _ in range(m)]
    shift = _r(rng.uniform(0, 0.3))
    tmpl = build_problem(
        drivers=tuple(f"0*y1 + {b}" for b in bump),
        costs=tuple(tuple("0" if i == j else f"-{_r(rng.uniform(0, 0.1))}" for j in range(m)) for i in range(m)),
        terminals=tuple(f"{shift}*(1 + cos(x1)^2)" for _ in range(m)),
        lipschitz=1.0,
    )
    high = low.replace(
        drivers=tuple(BinOp("+", f, d) for f, d in zip(low.drivers, tmpl.drivers)),
        terminals=tuple(BinOp("+", h, d) for h, d in zip(low.terminals, tmpl.terminals)),
        costs=tuple(tuple(c if i == j else BinOp("+", c, dc) for j, (c, dc) in enumerate(zip(r, rd))) for i, (r, rd) in enumerate(zip(low.costs, tmpl.costs))),
    )
    return low, high


def test_criterion_09_comparison(record):
    rng = np.random.default_rng(9)
    slacks = []
    for _ in range(10):
        low, high = _dominating_pair(rng)
        tx, xs = _samples(high)
        assert check_non_free_loop(high, tx).passed and check_terminal_consistency(high, xs).passed
        rep = comparison_harness(low, high, fd_grid(low), tol=1e-8, max_iter=200)
        assert rep["cooperative_checked"] and rep["converged"]
        slacks.append(rep["min_slack"])
    ok = min(slacks) >= -1e-3
    record(9, ok, f"min slack over 10 dominating pairs = {min(slacks):.3e} (>= -1e-3)")
    assert ok


def test_criterion_10_residuals(record, lipschitz_runs):
    fd_worst_obs, fd_worst_comp, runs = 0.0, 0.0, 0
    fd_cases = [(p, g, fld) for p, g, fld, st, _ in lipschitz_runs if st.converged]
    for name in ("two_mode", "coupled", "plane"):
        p = load_problem(PROBLEMS / f"{name}.prob")
        g = Grid.for_problem(p, 30, [BOX] * p.k, (41,) * p.k)
        fld, st = picard_solve(p, g)
        assert st.converged
        fd_cases.append((p, g, fld))
    tol_fd = SchemeOptions().obstacle_tolerance
    for p, g, fld in fd_cases:
        rep = residual_report(p, g, fld)
        fd_worst_obs = max(fd_worst_obs, max(rep["obstacle_violation"]["max"]))
        fd_worst_comp = max(fd_worst_comp, max(rep["complementarity"]["max"]))
        runs += 1
    rng = np.random.default_rng(10)
    lat_obs, lat_comp = 0.0, 0.0
    for _ in range(20):
        p = switching_instance(rng, int(rng.integers(1, 4)))
        res = lattice_dp(p, build_lattice(p, 0.0, 0.0, 6))
        r = res.residuals(p)
        lat_obs, lat_comp = max(lat_obs, r["obstacle_violation"]), max(lat_comp, r["complementarity"])
    ok = fd_worst_obs <= tol_fd and fd_worst_comp <= 1e-6 and lat_obs <= 1e-9 and lat_comp <= 1e-6
    record(
        10,
        ok,
        f"FD ({runs} runs): obstacle violation {fd_worst_obs:.2e} (<= {tol_fd:g}), complementarity {fd_worst_comp:.2e} (<= 1e-6); "
        f"lattice (20 runs): {lat_obs:.2e} (<= 1e-9), {lat_comp:.2e} (<= 1e-6)",
    )
    assert ok


def test_criterion_11_refinement(record):
    coarse = heat_error(200, 200)
    fine = heat_error(400, 400)
    ratio = coarse / fine
    ok = 1.5 <= ratio <= 4.5
    # diagnostic only: same spacing on a box twice as wide
    wide = heat_error(200, 400, box=(-8.0, 8.0))
    record(
        11,
        ok,
        f"|err| {coarse:.3e} -> {fine:.3e} after halving dt and dx, factor {ratio:.3f} (need [1.5, 4.5]); "
        f"same spacing on [-8, 8]: |err| {wide:.1e}",
    )
    assert ok


def _strip_timing(path: Path) -> bytes:
    if path.name == "manifest.json":
        data = json.loads(path.read_text())
        data.pop("wall_time")
        data.pop("threads")
        return json.dumps(data, sort_keys=True).encode()
    if path.name == "convergence.csv":
        rows = [r.rsplit(",", 1)[0] for r in path.read_text().splitlines()]
        return "\n".join(rows).encode()
    return path.read_bytes()


def test_criterion_12_determinism(record, tmp_path):
    commands = [
        ["validate", "--problem", str(PROBLEMS / "coupled.prob")],
        ["solve-pde", "--problem", str(PROBLEMS / "coupled.prob"), "--grid", "30x40"],
        ["solve-mc", "--problem", str(PROBLEMS / "coupled.prob"), "--grid", "10x2", "--paths", "20000", "--seed", "17"],
        ["oracle", "--problem", str(PROBLEMS / "two_mode.prob"), "--grid", "6x6"],
        ["compare", "--problem", str(PROBLEMS / "coupled.prob"), "--grid", "20x40", "--paths", "4000", "--seed", "3"],
        ["picard-diag", "--problem", str(PROBLEMS / "coupled.prob"), "--grid", "20x20", "--seed", "5"],
    ]
    identical, compared = True, 0
    for k, cmd in enumerate(commands):
        outs = []
        work = tmp_path / "out"
        for threads in ("1", "4", "1"):
            # same --out every time so the echoed config matches
            assert cli_run(cmd + ["--threads", threads, "--out", str(work)]) == 0
            outs.append(tmp_path / f"run{k}_{len(outs)}")
            shutil.move(str(work), str(outs[-1]))
        names = sorted(p.name for p in outs[0].iterdir())
        for other in outs[1:]:
            if sorted(p.name for p in other.iterdir()) != names:
                identical = False
                continue
            for n in names:
                compared += 1
                identical &= _strip_timing(outs[0] / n) == _strip_timing(other / n)
    record(12, identical, f"{len(commands)} commands x 3 runs (threads 1/4/1), {compared} file comparisons, bit-identical: {identical}")
    assert identical
