"""Monotone finite differences for the switching system on a truncated box.

One call of :func:`apply_theta_map` is one application of the frozen-driver
map: the y-arguments of every driver are read from a given field, the
obstacles stay coupled among the unknowns and are resolved by Gauss-Seidel
sweeps at each time layer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .problem import SwitchingProblem

logger = logging.getLogger(__name__)

BOUNDARIES = ("linear_extrapolation", "dirichlet_from_terminal")
GRADIENT_STENCILS = ("central", "upwind_fallback")


class MonotonicityError(ValueError):
    """The stencil has a negative off-diagonal entry (scheme not monotone)."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class ObstacleSweepError(RuntimeError):
    """Interconnected-obstacle sweeps did not stabilise within the cap."""


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid on [0, T] x box, k = 1 or 2.

    Nodes are flattened in C order (x1 slowest).
    """

    horizon: float
    time_steps: int
    box: tuple
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "box", tuple((float(lo), float(hi)) for lo, hi in self.box))
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))
        if self.time_steps < 1:
            raise ValueError("need at least one time step")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if len(self.box) != len(self.nodes) or len(self.box) not in (1, 2):
            raise ValueError("box and nodes must both have length 1 or 2")
        for (lo, hi), n in zip(self.box, self.nodes):
            if not hi > lo or n < 3:
                raise ValueError("each box side needs hi > lo and at least 3 nodes")

    @classmethod
    def for_problem(cls, p: SwitchingProblem, time_steps: int, box, nodes) -> "Grid":
        if p.k not in (1, 2):
            raise ValueError("finite differences support k = 1 or 2 only")
        box = list(box)
        nodes = list(np.atleast_1d(nodes))
        if len(box) == 1 and p.k == 2:
            box = box * 2
        if len(nodes) == 1 and p.k == 2:
            nodes = nodes * 2
        if len(box) != p.k:
            raise ValueError(f"box has {len(box)} sides but k = {p.k}")
        return cls(p.T, time_steps, tuple(box), tuple(nodes))

    @property
    def k(self) -> int:
        return len(self.box)

    @property
    def dt(self) -> float:
        return self.horizon / self.time_steps

    @property
    def dx(self) -> tuple:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.box, self.nodes))

    @cached_property
    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.box, self.nodes)]

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.time_steps + 1)

    @property
    def shape(self) -> tuple:
        return self.nodes

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes))

    @cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=-1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.nodes, dtype=bool)
        if self.k == 1:
            mask[[0, -1]] = True
        else:
            mask[[0, -1], :] = True
            mask[:, [0, -1]] = True
        return mask.ravel()

    def contains_interior(self, x0) -> bool:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return all(lo < c < hi for (lo, hi), c in zip(self.box, x0))

    def interpolate(self, layer: np.ndarray, x0) -> float:
        """Multilinear interpolation of one node array at a point of the box."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.k == 1:
            return float(np.interp(x0[0], self.axes[0], layer))
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator(self.axes, layer.reshape(self.nodes))
        return float(f(x0[None, :])[0])

    def describe(self) -> dict:
        return {
            "horizon": self.horizon,
            "time_steps": self.time_steps,
            "box": [list(b) for b in self.box],
            "nodes": list(self.nodes),
            "dt": self.dt,
            "dx": list(self.dx),
        }


@dataclass(frozen=True)
class SchemeOptions:
    theta: float = 1.0
    obstacle_inner_max_sweeps: int = 50
    obstacle_tolerance: float = 1e-6
    boundary: str = "linear_extrapolation"
    gradient_stencil: str = "central"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not self.obstacle_tolerance > 0:
            raise ValueError("obstacle_tolerance must be positive")
        if self.obstacle_inner_max_sweeps < 1:
            raise ValueError("obstacle_inner_max_sweeps must be >= 1")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        if self.gradient_stencil not in GRADIENT_STENCILS:
            raise ValueError(f"gradient_stencil must be one of {GRADIENT_STENCILS}")


@dataclass
class ValueField:
    """m value surfaces on a grid with their gradients and reflection data.

    Array shapes: ``values`` (m, N+1, n), ``gradients`` (m, N+1, n, d),
    ``reflection_increments`` (m, N+1, n), ``active_obstacle`` (m, N+1, n)
    holding the 1-based binding mode or 0 when the obstacle is slack.
    """

    grid: Grid
    values: np.ndarray
    gradients: np.ndarray
    reflection_increments: np.ndarray
    active_obstacle: np.ndarray
    continuation: Optional[np.ndarray] = None
    max_inner_sweeps: int = 0
    options: Optional[SchemeOptions] = None

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def at(self, mode: int, x0, time_index: int = 0) -> float:
        """Interpolated value of mode ``mode`` (0-based) at x0 on a time layer."""
        return self.grid.interpolate(self.values[mode, time_index], x0)

    @classmethod
    def from_values(cls, p: SwitchingProblem, grid: Grid, values: np.ndarray, opts=None) -> "ValueField":
        """Wrap sampled surfaces (no reflection data), computing gradients."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        opts = opts or SchemeOptions()
        grads = np.empty(values.shape + (p.d,))
        for i in range(values.shape[0]):
            for n, t in enumerate(grid.times):
                grads[i, n] = gradient_field(grid, values[i, n], p, t, opts.gradient_stencil)
        zeros = np.zeros_like(values)
        return cls(grid, values, grads, zeros, np.zeros(values.shape, dtype=int), options=opts)


def zero_field(p: SwitchingProblem, grid: Grid) -> ValueField:
    shape = (p.m, grid.time_steps + 1, grid.n_nodes)
    return ValueField(
        grid,
        np.zeros(shape),
        np.zeros(shape + (p.d,)),
        np.zeros(shape),
        np.zeros(shape, dtype=int),
    )


# --------------------------------------------------------------------------- generator


def _coefficients(p: SwitchingProblem, g: Grid, t: float):
    pts = g.points
    b = p.drift_at(t, pts)
    s = p.diffusion_at(t, pts)
    a = 0.5 * np.einsum("nij,nkj->nik", s, s)
    return b, s, a


def discretize_generator(p: SwitchingProblem, g: Grid, t: float, boundary: str = "linear_extrapolation"):
    """Sparse matrix of the generator at time t.

    Upwind first-order drift, central second differences, 7-point monotone
    cross-derivative stencil for k = 2. Boundary rows follow linear
    extrapolation: no second-order terms, outward drift dropped. With
    ``dirichlet_from_terminal`` boundary rows are zero (values imposed by
    the time stepper).
    """
    if p.k != g.k:
        raise ValueError("grid dimension does not match the problem")
    b, _, a = _coefficients(p, g, t)
    shape = g.nodes
    n = g.n_nodes
    idx = np.arange(n).reshape(shape)
    multi = np.stack(np.unravel_index(np.arange(n), shape), axis=-1)
    dx = g.dx
    rows, cols, vals = [], [], []
    diag = np.zeros(n)

    def add(src, dst, coef):
        # every off-diagonal entry is mirrored on the diagonal so rows sum to 0
        rows.append(src)
        cols.append(dst)
        vals.append(coef)
        np.add.at(diag, src, -coef)

    for ax in range(g.k):
        pos = multi[:, ax]
        interior = (pos > 0) & (pos < shape[ax] - 1)
        has_plus = pos < shape[ax] - 1
        has_minus = pos > 0
        step = int(np.prod(shape[ax + 1 :]))
        # second order along this axis
        sel = np.nonzero(interior)[0]
        c2 = a[sel, ax, ax] / dx[ax] ** 2
        add(sel, sel + step, c2)
        add(sel, sel - step, c2)
        # upwind drift (outward drift at boundary rows is dropped)
        bp = b[:, ax]
        sel = np.nonzero((bp > 0) & has_plus)[0]
        add(sel, sel + step, bp[sel] / dx[ax])
        sel = np.nonzero((bp < 0) & has_minus)[0]
        add(sel, sel - step, -bp[sel] / dx[ax])

    if g.k == 2:
        hx, hy = dx
        interior = (multi[:, 0] > 0) & (multi[:, 0] < shape[0] - 1) & (multi[:, 1] > 0) & (multi[:, 1] < shape[1] - 1)
        a12 = a[:, 0, 1]
        sx, sy = shape[1], 1
        for sign in (1, -1):
            sel = np.nonzero(interior & (np.sign(a12) == sign))[0]
            c = np.abs(a12[sel]) / (hx * hy)
            if sign > 0:
                add(sel, sel + sx + sy, c)
                add(sel, sel - sx - sy, c)
            else:
                add(sel, sel + sx - sy, c)
                add(sel, sel - sx + sy, c)
            for off in (sx, -sx, sy, -sy):
                add(sel, sel + off, -c)

    r = np.concatenate(rows + [np.arange(n)])
    c = np.concatenate(cols + [np.arange(n)])
    v = np.concatenate(vals + [diag])
    L = sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()
    L.sum_duplicates()
    if boundary == "dirichlet_from_terminal":
        bmask = g.boundary_mask()
        L = sp.diags((~bmask).astype(float)) @ L
    off = L - sp.diags(L.diagonal())
    off = off.tocoo()
    bad = off.data < -1e-12 * max(1.0, float(np.abs(L.data).max(initial=0.0)))
    if np.any(bad):
        node = int(off.row[np.argmax(bad)])
        x = tuple(float(v) for v in g.points[node])
        raise MonotonicityError(
            f"generator stencil not monotone at node {node} x={x} "
            "(cross-diffusion too strong for the mesh ratio); refine or rescale the grid",
            node=x,
        )
    return L.tocsr()


# --------------------------------------------------------------------------- gradients


def gradient_field(g: Grid, values: np.ndarray, p: SwitchingProblem, t: float, stencil: str = "central") -> np.ndarray:
    """sigma^T D_x u on every node, shape (n, d).

    Central differences inside the box and one-sided on its faces. With
    ``upwind_fallback`` each axis uses the difference in the drift's upwind
    direction (central where the drift component vanishes).
    """
    u = np.asarray(values, dtype=float).reshape(g.nodes)
    grads = np.gradient(u, *g.dx, edge_order=1)
    if g.k == 1:
        grads = [grads]
    grads = [gr.ravel() for gr in grads]
    pts = g.points
    if stencil == "upwind_fallback":
        b = p.drift_at(t, pts)
        for ax in range(g.k):
            fwd = np.zeros_like(u)
            bwd = np.zeros_like(u)
            du = np.diff(u, axis=ax) / g.dx[ax]
            sl_lo = [slice(None)] * g.k
            sl_hi = [slice(None)] * g.k
            sl_lo[ax] = slice(0, -1)
            sl_hi[ax] = slice(1, None)
            fwd[tuple(sl_lo)] = du
            bwd[tuple(sl_hi)] = du
            # faces keep the one-sided difference that exists
            last = [slice(None)] * g.k
            last[ax] = -1
            first = [slice(None)] * g.k
            first[ax] = 0
            fwd[tuple(last)] = bwd[tuple(last)]
            bwd[tuple(first)] = fwd[tuple(first)]
            bax = b[:, ax]
            grads[ax] = np.where(bax > 0, fwd.ravel(), np.where(bax < 0, bwd.ravel(), grads[ax]))
    elif stencil != "central":
        raise ValueError(f"unknown gradient stencil {stencil!r}")
    grad = np.stack(grads, axis=-1)  # (n, k)
    sigma = p.diffusion_at(t, pts)  # (n, k, d)
    return np.einsum("nkd,nk->nd", sigma, grad)


# --------------------------------------------------------------------------- time stepping


class _Operators:
    """Per-layer implicit/explicit matrices and factorizations, cached when
    the coefficients do not depend on time."""

    def __init__(self, p: SwitchingProblem, g: Grid, opts: SchemeOptions, shift: float = 0.0):
        self.p, self.g, self.opts, self.shift = p, g, opts, shift
        self.static = p.is_time_independent()
        self._cache = {}
        self.bmask = g.boundary_mask() if opts.boundary == "dirichlet_from_terminal" else None

    def generator(self, t):
        key = ("L", 0.0 if self.static else t)
        if key not in self._cache:
            self._cache[key] = discretize_generator(self.p, self.g, t, self.opts.boundary)
        return self._cache[key]

    def implicit(self, t):
        """LU of I - theta*dt*L - shift*dt*I at time t."""
        key = ("A", 0.0 if self.static else t)
        if key not in self._cache:
            dt, theta = self.g.dt, self.opts.theta
            n = self.g.n_nodes
            A = sp.identity(n, format="csr") - theta * dt * self.generator(t) - self.shift * dt * sp.identity(n)
            if self.bmask is not None:
                keep = sp.diags((~self.bmask).astype(float))
                A = keep @ A + sp.diags(self.bmask.astype(float))
            self._cache[key] = splu(A.tocsc())
        return self._cache[key]

    def explicit(self, t, values):
        """(I + (1 - theta) dt L) applied to node arrays (n,) or (n, m)."""
        theta = self.opts.theta
        if theta == 1.0:
            return values
        L = self.generator(t)
        diag = 1.0 + (1.0 - theta) * self.g.dt * L.diagonal()
        if np.any(diag < -1e-14):
            node = int(np.argmin(diag))
            raise MonotonicityError(
                f"CFL violated for theta={theta}: explicit weight {diag[node]:.3g} < 0 at node {node}; "
                "use more time steps or theta=1",
                node=tuple(self.g.points[node]),
            )
        return values + (1.0 - theta) * self.g.dt * (L @ values)


def resolve_obstacles(c: np.ndarray, costs: np.ndarray, tol: float, max_sweeps: int):
    """Gauss-Seidel sweeps y_i <- max(c_i, max_{j != i}(y_j - g_ij)).

    ``c`` has shape (m, n) and ``costs`` (m, m, n). Modes are visited in
    increasing order; a sweep changing nothing by more than ``tol`` ends the
    loop. Returns (y, sweeps).
    """
    m = c.shape[0]
    y = c.copy()
    if m == 1:
        return y, 1
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for i in range(m):
            others = [j for j in range(m) if j != i]
            obs = np.max(y[others] - costs[i, others], axis=0)
            new = np.maximum(c[i], obs)
            change = max(change, float(np.max(np.abs(new - y[i]))))
            y[i] = new
        if change <= tol:
            return y, sweep
    raise ObstacleSweepError(
        f"obstacle sweeps did not stabilise in {max_sweeps} sweeps (last change {change:.3g}); "
        "check the non-free-loop condition or loosen the tolerance"
    )


def binding_modes(y: np.ndarray, costs: np.ndarray, tol: float) -> np.ndarray:
    """1-based argmax mode of each obstacle where it binds, 0 elsewhere
    (ties go to the lowest mode)."""
    m = y.shape[0]
    out = np.zeros(y.shape, dtype=int)
    if m == 1:
        return out
    for i in range(m):
        cand = y - costs[i]  # (m, n)
        cand[i] = -np.inf
        j = np.argmax(cand, axis=0)
        obs = cand[j, np.arange(y.shape[1])]
        out[i] = np.where(y[i] - obs <= tol, j + 1, 0)
    return out


def cost_tensor(p: SwitchingProblem, g: Grid, t: float) -> np.ndarray:
    pts = g.points
    return np.stack([np.stack([p.cost_at(i, j, t, pts) for j in range(p.m)]) for i in range(p.m)])


def theta_step(p, g, ops: _Operators, n: int, y_next: np.ndarray, frozen_layer: np.ndarray, z_next: np.ndarray):
    """One backward layer t_{n+1} -> t_n.

    ``y_next`` (m, n_nodes) is the resolved layer n+1, ``frozen_layer``
    (m, n_nodes) supplies the drivers' y-arguments at t_n and ``z_next``
    (m, n_nodes, d) the lagged sigma^T D_x of the unknowns. Returns
    (y, c, dK, active, sweeps).
    """
    opts = ops.opts
    t, t_next = g.times[n], g.times[n + 1]
    pts = g.points
    yvec = frozen_layer.T  # (n, m)
    f = np.stack([p.driver_at(i, t, pts, yvec, z_next[i]) for i in range(p.m)])  # (m, n)
    rhs = ops.explicit(t_next, y_next.T) + g.dt * f.T  # (n, m)
    if ops.bmask is not None:
        rhs[ops.bmask] = np.stack([p.terminal_at(i, pts[ops.bmask]) for i in range(p.m)], axis=-1)
    c = ops.implicit(t).solve(np.ascontiguousarray(rhs)).T
    c = np.ascontiguousarray(c)
    costs = cost_tensor(p, g, t)
    y, sweeps = resolve_obstacles(c, costs, opts.obstacle_tolerance, opts.obstacle_inner_max_sweeps)
    dK = y - c
    active = binding_modes(y, costs, opts.obstacle_tolerance)
    return y, c, dK, active, sweeps


def _frozen_values(frozen, p, g) -> np.ndarray:
    arr = frozen.values if isinstance(frozen, ValueField) else np.asarray(frozen, dtype=float)
    expect = (p.m, g.time_steps + 1, g.n_nodes)
    if arr.shape != expect:
        raise ValueError(f"frozen field has shape {arr.shape}, expected {expect}")
    return arr


def apply_theta_map(p: SwitchingProblem, g: Grid, frozen, opts: SchemeOptions = SchemeOptions(), _ops=None) -> ValueField:
    """Solve the obstacle system with drivers' y-arguments read from ``frozen``.

    Layer N of ``frozen`` is never read (drivers enter at t_0..t_{N-1}).
    """
    gam = _frozen_values(frozen, p, g)
    ops = _ops or _Operators(p, g, opts)
    N, n, m = g.time_steps, g.n_nodes, p.m
    pts = g.points
    values = np.empty((m, N + 1, n))
    cont = np.empty((m, N + 1, n))
    grads = np.empty((m, N + 1, n, p.d))
    dK = np.zeros((m, N + 1, n))
    active = np.zeros((m, N + 1, n), dtype=int)
    values[:, N] = np.stack([p.terminal_at(i, pts) for i in range(m)])
    cont[:, N] = values[:, N]
    costs_T = cost_tensor(p, g, g.horizon)
    active[:, N] = binding_modes(values[:, N], costs_T, opts.obstacle_tolerance)
    for i in range(m):
        grads[i, N] = gradient_field(g, values[i, N], p, g.horizon, opts.gradient_stencil)
    max_sweeps = 0
    for k in range(N - 1, -1, -1):
        y, c, dk, act, sweeps = theta_step(p, g, ops, k, values[:, k + 1], gam[:, k], grads[:, k + 1])
        values[:, k], cont[:, k], dK[:, k], active[:, k] = y, c, dk, act
        max_sweeps = max(max_sweeps, sweeps)
        t = g.times[k]
        for i in range(m):
            grads[i, k] = gradient_field(g, y[i], p, t, opts.gradient_stencil)
    return ValueField(g, values, grads, dK, active, cont, max_sweeps, opts)


# --------------------------------------------------------------------------- residuals


def _apply_generator_direct(p: SwitchingProblem, g: Grid, t: float, u: np.ndarray) -> np.ndarray:
    """Generator applied on interior nodes by array slicing (NaN on faces).

    Written independently of :func:`discretize_generator`: upwind drift,
    central second differences and a plain central mixed difference.
    """
    U = u.reshape(g.nodes)
    b, _, a = _coefficients(p, g, t)
    b = b.reshape(g.nodes + (g.k,))
    a = a.reshape(g.nodes + (g.k, g.k))
    out = np.full(g.nodes, np.nan)
    inner = tuple(slice(1, -1) for _ in range(g.k))

    def shifted(ax, s):
        sl = [slice(1, -1)] * g.k
        sl[ax] = slice(1 + s, U.shape[ax] - 1 + s)
        return U[tuple(sl)]

    acc = np.zeros(tuple(n - 2 for n in g.nodes))
    for ax in range(g.k):
        h = g.dx[ax]
        up, mid, dn = shifted(ax, 1), U[inner], shifted(ax, -1)
        acc += a[inner + (ax, ax)] * (up - 2 * mid + dn) / h**2
        bb = b[inner + (ax,)]
        acc += np.where(bb > 0, bb * (up - mid) / h, bb * (mid - dn) / h)
    if g.k == 2:
        hx, hy = g.dx
        mixed = (U[2:, 2:] - U[2:, :-2] - U[:-2, 2:] + U[:-2, :-2]) / (4 * hx * hy)
        acc += 2 * a[inner + (0, 1)] * mixed
    out[inner] = acc
    return out.ravel()


def residual_report(p: SwitchingProblem, g: Grid, fld: ValueField, opts: Optional[SchemeOptions] = None) -> dict:
    """Obstacle violation, min-equation residual and complementarity per mode.

    Statistics are over interior nodes and layers 0..N-1. Returns a dict
    with per-mode lists under ``obstacle_violation``, ``pde_residual`` and
    ``complementarity`` (each with ``max`` and ``mean``).
    """
    opts = opts or fld.options or SchemeOptions()
    theta = opts.theta
    N, m = g.time_steps, p.m
    interior = ~g.boundary_mask()
    pts = g.points
    u = fld.values
    stats = {key: {"max": [0.0] * m, "mean": [0.0] * m} for key in ("obstacle_violation", "pde_residual", "complementarity")}
    acc = {key: [[] for _ in range(m)] for key in stats}
    for n in range(N):
        t, t1 = g.times[n], g.times[n + 1]
        costs = cost_tensor(p, g, t)
        for i in range(m):
            if m > 1:
                others = [j for j in range(m) if j != i]
                obstacle = np.max(u[others, n] - costs[i, others], axis=0)
            else:
                obstacle = np.full(g.n_nodes, -np.inf)
            gap = u[i, n] - obstacle
            # z lagged one layer, recomputed with plain central differences
            U1 = u[i, n + 1].reshape(g.nodes)
            gr = np.gradient(U1, *g.dx) if g.k > 1 else [np.gradient(U1, g.dx[0])]
            grad = np.stack([x.ravel() for x in gr], axis=-1)
            z = np.einsum("nkd,nk->nd", p.diffusion_at(t1, pts), grad)
            f = p.driver_at(i, t, pts, u[:, n].T, z)
            Lu = _apply_generator_direct(p, g, t, u[i, n])
            Lu1 = _apply_generator_direct(p, g, t1, u[i, n + 1]) if theta < 1 else 0.0
            pde = (u[i, n] - u[i, n + 1]) / g.dt - theta * Lu - (1 - theta) * Lu1 - f
            res = np.abs(np.minimum(gap, pde))
            acc["obstacle_violation"][i].append(np.maximum(0.0, -gap)[interior])
            acc["pde_residual"][i].append(res[interior])
            prod = fld.reflection_increments[i, n] * gap if m > 1 else np.zeros(g.n_nodes)
            acc["complementarity"][i].append(np.abs(prod)[interior])
    for key in stats:
        for i in range(m):
            arr = np.concatenate(acc[key][i])
            stats[key]["max"][i] = float(arr.max()) if arr.size else 0.0
            stats[key]["mean"][i] = float(arr.mean()) if arr.size else 0.0
    return stats
