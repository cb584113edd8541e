"""Outer fixed-point loop on the frozen-driver map and its diagnostics."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fd import (
    Grid,
    SchemeOptions,
    ValueField,
    _Operators,
    apply_theta_map,
    gradient_field,
    zero_field,
)
from .problem import SwitchingProblem, ValidationReport, Violation, check_cooperative

logger = logging.getLogger(__name__)


class DominanceError(ValueError):
    def __init__(self, message, witness=None):
        self.witness = witness
        super().__init__(message)


def alpha_star(C: float, T: float, m: int):
    """Weight making the frozen-driver map a contraction, and its bound.

    Returns (alpha0, bound) with alpha0 = 4 C T m and bound = 2 C T m / alpha0
    (the bound on the *squared* norm ratio). For C = 0 the map is constant
    in its argument: (0.0, 0.0) is returned and any positive weight works.
    """
    if C < 0 or T <= 0 or m < 1:
        raise ValueError("need C >= 0, T > 0, m >= 1")
    if C == 0:
        return 0.0, 0.0
    alpha0 = 4.0 * C * T * m
    return alpha0, 2.0 * C * T * m / alpha0


def slab_width(C: float, m: int) -> float:
    """eta solving 2 C m (exp(C eta) - 1) = 3/4."""
    if C <= 0:
        raise ValueError("slab width needs C > 0")
    if m < 1:
        raise ValueError("m must be >= 1")
    return math.log1p(3.0 / (8.0 * C * m)) / C


def weighted_norm(delta, alpha: float, g: Grid) -> float:
    """Discrete exp(alpha t)-weighted L2 norm over [0, T] x box.

    Left-endpoint rule over layers 0..N-1 with uniform node weights, i.e.
    sqrt(sum_n dt e^{alpha t_n} mean_x |delta(t_n, x)|^2). ``delta`` is
    (m, N+1, n) or a single surface (N+1, n).
    """
    d = np.asarray(delta, dtype=float)
    if d.ndim == 2:
        d = d[None]
    N = g.time_steps
    sq = np.sum(d[:, :N] ** 2, axis=0).mean(axis=-1)  # (N,)
    w = np.exp(alpha * g.times[:N]) * g.dt
    return float(np.sqrt(np.dot(w, sq)))


def sup_distance(a, b, g: Grid) -> float:
    N = g.time_steps
    return float(np.max(np.abs(np.asarray(a)[:, :N] - np.asarray(b)[:, :N])))


@dataclass
class PicardState:
    iteration: int = 0
    current: Optional[ValueField] = None
    previous: Optional[ValueField] = None
    alpha: float = 0.0
    tol: float = 0.0
    distance_history: list = field(default_factory=list)
    inf_history: list = field(default_factory=list)
    measured_ratios: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    converged: bool = False

    def log_records(self) -> list:
        out = []
        for q, d in enumerate(self.distance_history, start=1):
            ratio = self.measured_ratios[q - 2] if q >= 2 else None
            out.append(
                {
                    "q": q,
                    "alpha_distance": d,
                    "inf_distance": self.inf_history[q - 1],
                    "ratio": ratio,
                    "wall_time": self.wall_times[q - 1],
                }
            )
        return out


def picard_alpha(p: SwitchingProblem) -> float:
    alpha0, _ = alpha_star(p.lipschitz_const, p.T, p.m)
    # any positive weight is admissible when the drivers ignore (y, z)
    return alpha0 if alpha0 > 0 else 1.0 / p.T


def picard_solve(
    p: SwitchingProblem,
    g: Grid,
    opts: SchemeOptions = SchemeOptions(),
    tol: float = 1e-6,
    max_iter: int = 50,
    alpha: Optional[float] = None,
    init=None,
    inf_tol: Optional[float] = None,
):
    """Iterate the frozen-driver map from the zero field until the
    alpha-weighted distance between successive iterates is <= tol.

    ``inf_tol`` adds an optional sup-norm requirement. Returns
    (field, state); ``state.converged`` is False when max_iter was hit.
    """
    alpha = picard_alpha(p) if alpha is None else float(alpha)
    ops = _Operators(p, g, opts)
    current = init if init is not None else zero_field(p, g)
    state = PicardState(current=current, alpha=alpha, tol=tol)
    start = time.perf_counter()
    for q in range(1, max_iter + 1):
        new = apply_theta_map(p, g, current, opts, _ops=ops)
        d = weighted_norm(new.values - current.values, alpha, g)
        dinf = sup_distance(new.values, current.values, g)
        state.distance_history.append(d)
        state.inf_history.append(dinf)
        if q >= 2:
            prev = state.distance_history[-2]
            state.measured_ratios.append(d / prev if prev > 0 else 0.0)
        state.wall_times.append(time.perf_counter() - start)
        state.previous, state.current, state.iteration = current, new, q
        current = new
        logger.debug("picard q=%d alpha-dist=%.3e inf-dist=%.3e", q, d, dinf)
        if d <= tol and (inf_tol is None or dinf <= inf_tol):
            state.converged = True
            break
    return state.current, state


def contraction_probe(p: SwitchingProblem, g: Grid, opts: SchemeOptions, gamma_a, gamma_b, alpha: float) -> float:
    """||Theta(a) - Theta(b)||_alpha / ||a - b||_alpha.

    Compare against sqrt(2 C T m / alpha): the classical estimate bounds
    squared norms.
    """
    va = gamma_a.values if isinstance(gamma_a, ValueField) else np.asarray(gamma_a, dtype=float)
    vb = gamma_b.values if isinstance(gamma_b, ValueField) else np.asarray(gamma_b, dtype=float)
    denom = weighted_norm(va - vb, alpha, g)
    if denom == 0:
        raise ValueError("contraction probe needs two different fields (zero denominator)")
    ops = _Operators(p, g, opts)
    ta = apply_theta_map(p, g, va, opts, _ops=ops)
    tb = apply_theta_map(p, g, vb, opts, _ops=ops)
    return weighted_norm(ta.values - tb.values, alpha, g) / denom


@dataclass
class BoundField:
    grid: Grid
    values: np.ndarray  # (N+1, n)
    c_bar: float = 0.0

    def excess(self, fld: ValueField) -> float:
        """max over modes and nodes of |u^i| - v (<= 0 when dominated)."""
        return float(np.max(np.abs(fld.values) - self.values[None]))


def dominating_bound(
    p: SwitchingProblem, g: Grid, opts: SchemeOptions = SchemeOptions(), c_bar: Optional[float] = None
) -> BoundField:
    """Scalar surface v >= |u^i| from the semilinear equation with driver
    c_bar*m*|y| + c_bar*|z| + sum_i |f_i(t, x, 0, 0)| and terminal sum_i |h_i|.

    c_bar is the sum of the per-mode Lipschitz constants; with only the
    common declared constant C available it defaults to m*C. The |y| term is
    taken implicitly (v >= 0 makes it linear), z is lagged as in the main
    scheme.
    """
    m = p.m
    c_bar = m * p.lipschitz_const if c_bar is None else float(c_bar)
    shift = c_bar * m
    if shift * g.dt >= 1.0:
        raise ValueError(f"time step too large for the bound: dt*c_bar*m = {shift * g.dt:.3g} >= 1")
    ops = _Operators(p, g, opts, shift=shift)
    N, n = g.time_steps, g.n_nodes
    pts = g.points
    v = np.empty((N + 1, n))
    phi = sum(np.abs(p.terminal_at(i, pts)) for i in range(m))
    v[N] = phi
    zeros_y = np.zeros((n, m))
    zeros_z = np.zeros((n, p.d))
    for k in range(N - 1, -1, -1):
        t = g.times[k]
        z = gradient_field(g, v[k + 1], p, g.times[k + 1], opts.gradient_stencil)
        f0 = sum(np.abs(p.driver_at(i, t, pts, zeros_y, zeros_z)) for i in range(m))
        rhs = ops.explicit(g.times[k + 1], v[k + 1]) + g.dt * (c_bar * np.linalg.norm(z, axis=-1) + f0)
        if ops.bmask is not None:
            rhs[ops.bmask] = phi[ops.bmask]
        v[k] = ops.implicit(t).solve(rhs)
    return BoundField(g, v, c_bar)


def _dominance_samples(g: Grid, n_times=5, n_space=9):
    ts = np.unique(np.linspace(0, g.time_steps, n_times).round().astype(int))
    idx = np.unique(np.linspace(0, g.n_nodes - 1, n_space).round().astype(int))
    return [(g.times[a], g.points[b]) for a in ts for b in idx]


def check_dominance(p_low: SwitchingProblem, p_high: SwitchingProblem, g: Grid, n_probes=6, seed=0) -> ValidationReport:
    """f_low <= f_high, h_low <= h_high and g_low >= g_high on grid samples."""
    if (p_low.m, p_low.k, p_low.d) != (p_high.m, p_high.k, p_high.d):
        raise ValueError("problems must share dimensions")
    rng = np.random.default_rng(seed)
    rep = ValidationReport("dominance")
    m = p_low.m
    for t, x in _dominance_samples(g):
        for i in range(m):
            for _ in range(n_probes):
                y = rng.uniform(-2, 2, size=m)
                z = rng.uniform(-2, 2, size=p_low.d)
                s = float(p_high.driver_at(i, t, x, y, z) - p_low.driver_at(i, t, x, y, z))
                rep.checked += 1
                rep._track(s)
                if s < -1e-12:
                    rep.violations.append(Violation("driver_order", t, tuple(x), (i + 1,), s))
            s = float(p_high.terminal_at(i, x) - p_low.terminal_at(i, x))
            rep.checked += 1
            rep._track(s)
            if s < -1e-12:
                rep.violations.append(Violation("terminal_order", None, tuple(x), (i + 1,), s))
            for j in range(m):
                if i == j:
                    continue
                s = float(p_low.cost_at(i, j, t, x) - p_high.cost_at(i, j, t, x))
                rep.checked += 1
                rep._track(s)
                if s < -1e-12:
                    rep.violations.append(Violation("cost_order", t, tuple(x), (i + 1, j + 1), s))
    return rep


def comparison_harness(
    p_low: SwitchingProblem,
    p_high: SwitchingProblem,
    g: Grid,
    opts: SchemeOptions = SchemeOptions(),
    tol: float = 1e-8,
    max_iter: int = 60,
    combined_tol: float = 1e-3,
) -> dict:
    """Solve both problems and report the node-wise slack u_high - u_low.

    Preconditions (coefficient order on grid samples, cooperative drivers)
    are spot-checked first; a violated order raises DominanceError.
    """
    dom = check_dominance(p_low, p_high, g)
    if not dom.passed:
        v = dom.violations[0]
        raise DominanceError(f"dominance precondition violated: {v.check} at t={v.t} x={v.x} slack={v.slack:.3g}", v)
    samples = _dominance_samples(g, 3, 5)
    coop = [check_cooperative(q, samples) for q in (p_low, p_high)]
    low, st_low = picard_solve(p_low, g, opts, tol, max_iter)
    high, st_high = picard_solve(p_high, g, opts, tol, max_iter)
    slack = high.values - low.values
    per_mode = [float(slack[i].min()) for i in range(p_low.m)]
    min_slack = min(per_mode)
    return {
        "min_slack": min_slack,
        "min_slack_per_mode": per_mode,
        "terminal_slack_min": float(slack[:, -1].min()),
        "passed": min_slack >= -combined_tol,
        "combined_tol": combined_tol,
        "cooperative_checked": all(r.passed for r in coop),
        "converged": st_low.converged and st_high.converged,
        "iterations": (st_low.iteration, st_high.iteration),
        "low": low,
        "high": high,
    }
