"""Independent reference values: trinomial lattice dynamic programming,
exhaustive strategy enumeration and regression Monte Carlo on Euler paths."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fd import binding_modes, resolve_obstacles
from .problem import SwitchingProblem


class LatticeError(ValueError):
    pass


class EnumerationGuardError(RuntimeError):
    pass


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


# --------------------------------------------------------------------------- lattice


@dataclass
class LatticeModel:
    """Recombining trinomial lattice on x0 + j*dx.

    Layer n holds nodes j = lo[n] .. lo[n] + len(states[n]) - 1. Node r of
    layer n branches to rows child[n][r] - 1, child[n][r], child[n][r] + 1 of
    layer n+1 with probabilities probs[n][r] = (p_down, p_mid, p_up).
    """

    t0: float
    x0: float
    horizon: float
    steps: int
    dx: float
    states: list
    lo: list
    child: list
    probs: list

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def points(self, n: int) -> np.ndarray:
        return self.states[n][:, None]

    def moments(self, n: int):
        """Mean and variance of one lattice step from each node of layer n."""
        x, nxt = self.states[n], self.states[n + 1]
        c = self.child[n]
        pd, pm, pu = self.probs[n].T
        jumps = np.stack([nxt[c - 1] - x, nxt[c] - x, nxt[c + 1] - x])
        mean = pd * jumps[0] + pm * jumps[1] + pu * jumps[2]
        second = pd * jumps[0] ** 2 + pm * jumps[1] ** 2 + pu * jumps[2] ** 2
        return mean, second - mean**2


def build_lattice(p: SwitchingProblem, t0: float, x0: float, N: int, dx: Optional[float] = None) -> LatticeModel:
    """Trinomial lattice matching the local mean b*dt and variance sigma^2*dt.

    The middle branch is the grid node nearest x + b*dt; with e the residual
    shift, p_up - p_down = e/dx and p_up + p_down = (sigma^2 dt + e^2)/dx^2.
    Default dx = sigma(t0, x0)*sqrt(3 dt); for sigma = 0 it falls back to
    |b(t0, x0)|*dt (or sqrt(dt) when both vanish).
    """
    if p.k != 1:
        raise LatticeError("lattice oracle supports one state dimension only")
    if N < 1:
        raise LatticeError("need at least one time step")
    if not t0 < p.T:
        raise LatticeError("t0 must lie before the horizon")
    dt = (p.T - t0) / N
    if dx is None:
        sig0 = float(np.sqrt(np.sum(p.diffusion_at(t0, [x0]) ** 2)))
        b0 = abs(float(p.drift_at(t0, [x0])[0]))
        dx = sig0 * math.sqrt(3 * dt) if sig0 > 0 else (b0 * dt if b0 > 0 else math.sqrt(dt))
    if not dx > 0:
        raise LatticeError("dx must be positive")
    states, los, childs, probs = [np.array([float(x0)])], [0], [], []
    for n in range(N):
        t = t0 + n * dt
        lo = los[n]
        js = lo + np.arange(len(states[n]))
        x = states[n]
        pts = x[:, None]
        b = p.drift_at(t, pts)[:, 0]
        var = np.sum(p.diffusion_at(t, pts) ** 2, axis=(-1, -2)) * dt
        shift = np.rint(b * dt / dx).astype(int)
        e = b * dt - shift * dx
        s2 = (var + e**2) / dx**2
        pu = 0.5 * (s2 + e / dx)
        pd = 0.5 * (s2 - e / dx)
        pm = 1.0 - s2
        P = np.stack([pd, pm, pu], axis=-1)
        bad = np.any((P < -1e-12) | (P > 1 + 1e-12), axis=-1)
        if np.any(bad):
            r = int(np.argmax(bad))
            raise LatticeError(
                f"branch probabilities {P[r].round(4).tolist()} out of [0, 1] at t={t:.4g}, x={x[r]:.4g}; "
                "use a smaller time step or adjust dx (need 1/4 <= sigma^2 dt/dx^2 <= 3/4)"
            )
        P = np.clip(P, 0.0, 1.0)
        mids = js + shift
        nlo = int(mids.min()) - 1
        nhi = int(mids.max()) + 1
        childs.append(mids - nlo)
        probs.append(P)
        los.append(nlo)
        states.append(x0 + dx * np.arange(nlo, nhi + 1))
    return LatticeModel(float(t0), float(x0), p.T, N, float(dx), states, los, childs, probs)


def _expect(lat: LatticeModel, n: int, v_next: np.ndarray) -> np.ndarray:
    """E[V(t_{n+1}) | node] for every node of layer n; v_next (..., n_next)."""
    c = lat.child[n]
    P = lat.probs[n]
    return P[:, 2] * v_next[..., c + 1] + P[:, 1] * v_next[..., c] + P[:, 0] * v_next[..., c - 1]


def _lattice_costs(p: SwitchingProblem, t: float, pts: np.ndarray) -> np.ndarray:
    return np.stack([np.stack([p.cost_at(i, j, t, pts) for j in range(p.m)]) for i in range(p.m)])


def _driver_layer(p: SwitchingProblem, lat: LatticeModel, n: int, frozen) -> np.ndarray:
    """Driver values (m, nodes) at layer n; y-arguments from ``frozen``."""
    pts = lat.points(n)
    nn = len(pts)
    if p.driver_uses("z"):
        raise LatticeError("lattice oracle needs z-independent drivers; route z-dependent problems to lsmc_solve")
    if frozen is None:
        if p.driver_uses("y"):
            raise LatticeError("drivers depend on y; pass frozen surfaces (see lattice_picard)")
        y = np.zeros((nn, p.m))
    else:
        y = np.asarray(frozen[n], dtype=float).T
    z = np.zeros((nn, p.d))
    t = lat.times[n]
    return np.stack([p.driver_at(i, t, pts, y, z) for i in range(p.m)])


@dataclass
class LatticeValues:
    lattice: LatticeModel
    values: list  # per layer (m, nodes)
    continuation: list
    active: list
    max_sweeps: int = 0

    @property
    def root(self) -> np.ndarray:
        return self.values[0][:, 0].copy()

    def residuals(self, p: SwitchingProblem) -> dict:
        """Worst obstacle violation and complementarity product over all nodes."""
        viol, comp = 0.0, 0.0
        for n in range(self.lattice.steps):
            y, c = self.values[n], self.continuation[n]
            g = _lattice_costs(p, self.lattice.times[n], self.lattice.points(n))
            for i in range(p.m):
                others = [j for j in range(p.m) if j != i]
                obs = np.max(y[others] - g[i, others], axis=0) if others else np.full(y.shape[1], -np.inf)
                viol = max(viol, float(np.max(obs - y[i], initial=0.0)))
                gap = np.where(np.isfinite(obs), y[i] - obs, 0.0)
                comp = max(comp, float(np.max(np.abs((y[i] - c[i]) * gap))))
        return {"obstacle_violation": viol, "complementarity": comp}


def lattice_dp(
    p: SwitchingProblem, lat: LatticeModel, frozen=None, tol: float = 0.0, max_sweeps: int = 100
) -> LatticeValues:
    """Backward recursion V_i = max(f_i dt + E[V_i(next)], max_{j != i}(V_j - g_ij)).

    The inner fixed point uses the same Gauss-Seidel sweeps as the finite
    difference solver (lowest mode first); ``tol=0`` iterates until nothing
    changes. ``frozen`` is a per-layer list of (m, nodes) arrays supplying the
    drivers' y-arguments.
    """
    N = lat.steps
    vals, conts, acts = [None] * (N + 1), [None] * (N + 1), [None] * (N + 1)
    pts = lat.points(N)
    vals[N] = np.stack([p.terminal_at(i, pts) for i in range(p.m)])
    conts[N] = vals[N]
    acts[N] = np.zeros(vals[N].shape, dtype=int)
    worst = 0
    for n in range(N - 1, -1, -1):
        f = _driver_layer(p, lat, n, frozen)
        c = _expect(lat, n, vals[n + 1]) + lat.dt * f
        costs = _lattice_costs(p, lat.times[n], lat.points(n))
        y, sweeps = resolve_obstacles(c, costs, tol, max_sweeps)
        worst = max(worst, sweeps)
        vals[n], conts[n] = y, c
        acts[n] = binding_modes(y, costs, 1e-12)
    return LatticeValues(lat, vals, conts, acts, worst)


def lattice_picard(p: SwitchingProblem, lat: LatticeModel, tol: float = 1e-12, max_iter: int = 200):
    """Fixed point of the frozen-driver map on the lattice, started from zero.

    Returns (LatticeValues, iterations, converged)."""
    frozen = [np.zeros((p.m, len(s))) for s in lat.states]
    res = None
    for q in range(1, max_iter + 1):
        res = lattice_dp(p, lat, frozen)
        dist = max(float(np.max(np.abs(a - b))) for a, b in zip(res.values, frozen))
        frozen = res.values
        if dist <= tol:
            return res, q, True
    return res, max_iter, False


# --------------------------------------------------------------------------- strategies


@dataclass(frozen=True)
class Strategy:
    """Initial mode plus switches (time index, new mode); modes are 1-based."""

    initial_mode: int
    switches: tuple = ()

    def __post_init__(self):
        prev_t, prev_mode = 0, self.initial_mode
        for t, mode in self.switches:
            if t < prev_t:
                raise ValueError("switch times must be nondecreasing")
            if mode == prev_mode:
                raise ValueError("consecutive modes must differ")
            prev_t, prev_mode = t, mode

    def mode_schedule(self, N: int) -> list:
        """Per time index n: the chain of modes visited at n (incoming first)."""
        chains, mode, k = [], self.initial_mode, 0
        for n in range(N + 1):
            chain = [mode]
            while k < len(self.switches) and self.switches[k][0] == n:
                mode = self.switches[k][1]
                chain.append(mode)
                k += 1
            chains.append(chain)
        return chains

    def as_list(self) -> list:
        return [[int(t), int(mode)] for t, mode in self.switches]


def cost_process(s: Strategy, p: SwitchingProblem, path, times) -> np.ndarray:
    """A_n: cumulative switching cost including switches at index n."""
    path = np.asarray(path, dtype=float).reshape(len(times), -1)
    out = np.zeros(len(times))
    prev = s.initial_mode
    for t_idx, mode in s.switches:
        if t_idx >= len(times):
            raise ValueError("switch time outside the path's grid")
        out[t_idx:] += float(p.cost_at(prev - 1, mode - 1, times[t_idx], path[t_idx]))
        prev = mode
    return out


def switching_cost(s: Strategy, p: SwitchingProblem, path, times) -> float:
    """Total cost of the switches of ``s`` along one path."""
    if not s.switches:
        return 0.0
    return float(cost_process(s, p, path, times)[-1])


class _LatticeData:
    """Per-layer driver, cost and terminal arrays shared by strategy scans."""

    def __init__(self, p: SwitchingProblem, lat: LatticeModel, frozen=None):
        self.p, self.lat = p, lat
        N = lat.steps
        self.f = [_driver_layer(p, lat, n, frozen) for n in range(N)]
        self.g = [_lattice_costs(p, lat.times[n], lat.points(n)) for n in range(N)]
        pts = lat.points(N)
        self.h = [p.terminal_at(i, pts) for i in range(p.m)]


def _evaluate(s: Strategy, data: _LatticeData) -> float:
    p, lat = data.p, data.lat
    N = lat.steps
    if any(t >= N for t, _ in s.switches):
        raise ValueError("switches at the final time index are not allowed")
    if not 1 <= s.initial_mode <= p.m or any(not 1 <= md <= p.m for _, md in s.switches):
        raise ValueError("mode out of range")
    chains = s.mode_schedule(N)
    W = data.h[chains[N - 1][-1] - 1]
    for n in range(N - 1, -1, -1):
        chain = chains[n]
        W = _expect(lat, n, W) + lat.dt * data.f[n][chain[-1] - 1]
        for a, b in reversed(list(zip(chain[:-1], chain[1:]))):
            W = W - data.g[n][a - 1, b - 1]
    return float(W[0])


def evaluate_strategy(s: Strategy, p: SwitchingProblem, lat: LatticeModel, frozen=None) -> float:
    """Expected payoff minus switching costs of a deterministic-time strategy
    at the lattice root, by backward expectation.

    Costs at one time index are subtracted last switch first, which keeps
    the arithmetic identical to the obstacle sweeps of :func:`lattice_dp`.
    """
    return _evaluate(s, _LatticeData(p, lat, frozen))


def _chains(start: int, m: int, depth_left: int):
    """Sequences of distinct new modes reachable from ``start`` in one
    instant, lexicographic order, empty first."""
    yield ()
    if depth_left == 0:
        return
    for nxt in range(1, m + 1):
        if nxt == start:
            continue
        for rest in _chains_excluding(nxt, m, {start, nxt}, depth_left - 1):
            yield (nxt,) + rest


def _chains_excluding(cur, m, used, depth_left):
    yield ()
    if depth_left == 0:
        return
    for nxt in range(1, m + 1):
        if nxt in used:
            continue
        for rest in _chains_excluding(nxt, m, used | {nxt}, depth_left - 1):
            yield (nxt,) + rest


def _deterministic_strategies(i0, m, N, max_switches):
    def rec(n, mode, prefix, budget):
        if n == N:
            yield prefix
            return
        for chain in _chains(mode, m, min(m - 1, budget)):
            sw = tuple((n, md) for md in chain)
            yield from rec(n + 1, chain[-1] if chain else mode, prefix + sw, budget - len(chain))

    # lexicographic order of the switch list, empty list first
    return sorted(rec(0, i0, (), max_switches))


def count_deterministic_strategies(m: int, N: int) -> int:
    per_step = sum(1 for _ in _chains(1, m, m - 1))
    return per_step**N


@dataclass
class FeedbackPolicy:
    """Chain of switches chosen at each (time index, node, incoming mode)."""

    initial_mode: int
    decisions: dict = field(default_factory=dict)

    def as_list(self) -> list:
        return [[n, r, i, list(ch)] for (n, r, i), ch in sorted(self.decisions.items()) if ch]


def _evaluate_feedback(data: _LatticeData, decisions):
    lat, m = data.lat, data.p.m
    W = np.stack(data.h)
    for n in range(lat.steps - 1, -1, -1):
        cont = _expect(lat, n, W) + lat.dt * data.f[n]
        g = data.g[n]
        new = np.empty_like(cont)
        for i in range(m):
            for r in range(len(lat.states[n])):
                chain = (i + 1,) + decisions[(n, r, i + 1)]
                v = cont[chain[-1] - 1, r]
                for a, b in reversed(list(zip(chain[:-1], chain[1:]))):
                    v = v - g[a - 1, b - 1, r]
                new[i, r] = v
        W = new
    return W[:, 0]


def enumerate_strategies(
    p: SwitchingProblem,
    lat: LatticeModel,
    i0: int,
    max_switches: Optional[int] = None,
    family: str = "deterministic",
    frozen=None,
    max_count: int = 200_000,
):
    """Exhaustive maximum of the strategy value over an admissible family.

    ``family="deterministic"`` scans switch lists at grid times (ties keep
    the lexicographically earliest list, the empty list first);
    ``family="feedback"`` scans every node-wise policy and is limited to
    N*m <= 20. Returns (value, best).
    """
    N, m = lat.steps, p.m
    if not 1 <= i0 <= m:
        raise ValueError("initial mode out of range")
    cap = N * (m - 1) if max_switches is None else int(max_switches)
    if family == "deterministic":
        if count_deterministic_strategies(m, N) > max_count and max_switches is None:
            raise EnumerationGuardError(f"{count_deterministic_strategies(m, N)} strategies exceed the guard {max_count}")
        data = _LatticeData(p, lat, frozen)
        best_val, best = -math.inf, None
        for k, sw in enumerate(_deterministic_strategies(i0, m, N, cap)):
            if k >= max_count:
                raise EnumerationGuardError(f"more than {max_count} strategies")
            s = Strategy(i0, sw)
            v = _evaluate(s, data)
            if v > best_val:
                best_val, best = v, s
        return best_val, best
    if family == "feedback":
        if N * m > 20:
            raise EnumerationGuardError(f"feedback enumeration needs N*m <= 20 (got {N * m})")
        keys, options = [], []
        for n in range(N):
            for r in range(len(lat.states[n])):
                for i in range(1, m + 1):
                    keys.append((n, r, i))
                    options.append(list(_chains(i, m, m - 1)))
        total = math.prod(len(o) for o in options)
        if total > max_count:
            raise EnumerationGuardError(f"{total} feedback policies exceed the guard {max_count}")
        data = _LatticeData(p, lat, frozen)
        best_val, best = -math.inf, None
        for combo in itertools.product(*options):
            dec = dict(zip(keys, combo))
            v = float(_evaluate_feedback(data, dec)[i0 - 1])
            if v > best_val:
                best_val, best = v, FeedbackPolicy(i0, dec)
        return best_val, best
    raise ValueError(f"unknown strategy family {family!r}")


# --------------------------------------------------------------------------- Monte Carlo


@dataclass
class PathBundle:
    t0: float
    x0: tuple
    horizon: float
    steps: int
    seed: int
    X: np.ndarray  # (M, N+1, k)
    dB: np.ndarray  # (M, N, d)

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def subset(self, idx) -> "PathBundle":
        return PathBundle(self.t0, self.x0, self.horizon, self.steps, self.seed, self.X[idx], self.dB[idx])

    def to_text(self) -> str:
        """Flat comma-separated rows: path, n, x1..xk, dB1..dBd (nan on the last layer)."""
        M, N1, k = self.X.shape
        d = self.dB.shape[2]
        head = ["path", "n"] + [f"x{a + 1}" for a in range(k)] + [f"dB{b + 1}" for b in range(d)]
        rows = [",".join(head)]
        nan = ["nan"] * d
        for i in range(M):
            for n in range(N1):
                inc = [repr(float(v)) for v in self.dB[i, n]] if n < N1 - 1 else nan
                rows.append(",".join([str(i), str(n)] + [repr(float(v)) for v in self.X[i, n]] + inc))
        return "\n".join(rows) + "\n"


def euler_paths(p: SwitchingProblem, t0: float, x0, N: int, M: int, seed: int) -> PathBundle:
    """Euler-Maruyama paths X_{n+1} = X_n + b dt + sigma dB_n."""
    if N < 1 or M < 1:
        raise ValueError("need N >= 1 and M >= 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (p.k,):
        raise ValueError(f"x0 must have {p.k} coordinates")
    dt = (p.T - t0) / N
    rng = np.random.default_rng(seed)
    dB = rng.standard_normal((M, N, p.d)) * math.sqrt(dt)
    X = np.empty((M, N + 1, p.k))
    X[:, 0] = x0
    for n in range(N):
        t = t0 + n * dt
        Xn = X[:, n]
        X[:, n + 1] = Xn + p.drift_at(t, Xn) * dt + np.einsum("mkd,md->mk", p.diffusion_at(t, Xn), dB[:, n])
    return PathBundle(float(t0), tuple(x0.tolist()), p.T, N, int(seed), X, dB)


def polynomial_basis(X: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= degree in standardized coordinates;
    coordinates with no spread contribute only the constant."""
    M, k = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12 * (1.0 + np.abs(mu))
    Z = (X[:, live] - mu[live]) / sd[live]
    cols = [np.ones(M)]
    kk = Z.shape[1]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(kk), deg):
            cols.append(np.prod(Z[:, list(combo)], axis=1))
    return np.stack(cols, axis=1)


def _project(A: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares fitted values of each column of ``targets`` on A."""
    coef, _, rank, _ = np.linalg.lstsq(A, targets, rcond=None)
    if rank < A.shape[1]:
        raise RankDeficiencyError(f"regression design has rank {rank} < {A.shape[1]}; use more paths or a lower degree")
    return A @ coef


def _lsmc_backward(p: SwitchingProblem, b: PathBundle, degree: int, frozen, tol: float, max_sweeps: int) -> np.ndarray:
    N, dt, m = b.steps, b.dt, p.m
    times = b.times
    Y = np.stack([p.terminal_at(i, b.X[:, N]) for i in range(m)])  # (m, M)
    for n in range(N - 1, -1, -1):
        Xn = b.X[:, n]
        A = polynomial_basis(Xn, degree)
        E = _project(A, Y.T).T  # (m, M)
        if p.driver_uses("z"):
            w = b.dB[:, n] / dt  # (M, d)
            resid = Y - E
            Z = np.stack([_project(A, resid[i][:, None] * w) for i in range(m)])  # (m, M, d)
        else:
            Z = np.zeros((m, b.M, p.d))
        yarg = frozen(n, times[n], Xn) if frozen is not None else E.T
        f = np.stack([p.driver_at(i, times[n], Xn, yarg, Z[i]) for i in range(m)])
        c = E + dt * f
        costs = np.stack([np.stack([p.cost_at(i, j, times[n], Xn) for j in range(m)]) for i in range(m)])
        Y, _ = resolve_obstacles(c, costs, tol, max_sweeps)
    return Y.mean(axis=1)


@dataclass
class LsmcResult:
    values: np.ndarray
    std_errors: np.ndarray
    n_paths: int
    degree: int
    bootstrap: int
    low_confidence: bool
    se_cap: float

    def summary(self) -> dict:
        return {
            "values": [float(v) for v in self.values],
            "std_errors": [float(s) for s in self.std_errors],
            "n_paths": self.n_paths,
            "degree": self.degree,
            "bootstrap": self.bootstrap,
            "low_confidence": self.low_confidence,
            "se_cap": self.se_cap,
        }


def lsmc_solve(
    p: SwitchingProblem,
    paths: PathBundle,
    degree: int = 3,
    frozen: Optional[Callable] = None,
    bootstrap: int = 20,
    seed: Optional[int] = None,
    se_cap: float = 0.05,
    tol: float = 0.0,
    max_sweeps: int = 100,
) -> LsmcResult:
    """Regression Monte Carlo values of all modes at (t0, x0).

    Conditional expectations are projected on polynomials of X_n; Z_i is the
    projection of (Y_i(n+1) - E_i) dB_n/dt. The driver's y-argument is the
    regressed continuation unless ``frozen(n, t, X)`` supplies (M, m)
    values. Standard errors come from rerunning the whole recursion on
    path indices resampled with replacement.
    """
    if paths.M < 2:
        raise ValueError("need at least two paths")
    vals = _lsmc_backward(p, paths, degree, frozen, tol, max_sweeps)
    rng = np.random.default_rng([paths.seed if seed is None else seed, 1])
    reps = []
    for _ in range(bootstrap):
        idx = rng.integers(0, paths.M, size=paths.M)
        reps.append(_lsmc_backward(p, paths.subset(idx), degree, frozen, tol, max_sweeps))
    se = np.std(np.array(reps), axis=0, ddof=1) if bootstrap >= 2 else np.full(p.m, np.nan)
    low = bool(np.any(~np.isfinite(se)) or np.any(se > se_cap))
    return LsmcResult(vals, se, paths.M, degree, bootstrap, low, se_cap)


def oracle_summary(value, best=None, std_error=None) -> dict:
    out = {"value": float(value), "std_error": None if std_error is None else float(std_error)}
    if isinstance(best, Strategy):
        out["initial_mode"] = best.initial_mode
        out["best_strategy"] = best.as_list()
    elif isinstance(best, FeedbackPolicy):
        out["initial_mode"] = best.initial_mode
        out["best_policy"] = best.as_list()
    return out
