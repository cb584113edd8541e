"""Switching problem data, problem-file I/O and standing-assumption checks."""
from __future__ import annotations

import dataclasses
import itertools
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .expr import Expr, ExpressionSyntaxError, format_expression, parse_expression


class ProblemFileError(ValueError):
    """Raised for malformed problem files; carries 1-based line/column."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class SwitchingProblem:
    """Full datum of an m-mode switching problem.

    ``drift[a]`` is b_a(t, x); ``diffusion[a][b]`` is sigma_ab(t, x);
    ``drivers[i]`` is f_i(t, x, y, z); ``costs[i][j]`` is g_ij(t, x);
    ``terminals[i]`` is h_i(x). Modes are 0-based in code, 1-based in
    files and reports.
    """

    state_dim: int
    brownian_dim: int
    mode_count: int
    horizon: float
    drift: tuple
    diffusion: tuple
    drivers: tuple
    costs: tuple
    terminals: tuple
    lipschitz_const: float = 0.0
    growth_exponent: int = 1

    def __post_init__(self):
        k, d, m = self.state_dim, self.brownian_dim, self.mode_count
        if k < 1 or d < 1:
            raise ValueError("state and Brownian dimensions must be positive")
        if m < 1:
            raise ValueError("mode_count must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.lipschitz_const < 0:
            raise ValueError("lipschitz_const must be nonnegative")
        if len(self.drift) != k or len(self.diffusion) != k or any(len(r) != d for r in self.diffusion):
            raise ValueError("drift must have k entries and diffusion must be k x d")
        if len(self.drivers) != m or len(self.terminals) != m:
            raise ValueError("need one driver and one terminal per mode")
        if len(self.costs) != m or any(len(r) != m for r in self.costs):
            raise ValueError("costs must be m x m")
        # bare x, y, z alias x1, y1, z1 when the dimension is one
        allowed_tx = {"t"} | {f"x{a + 1}" for a in range(k)} | ({"x"} if k == 1 else set())
        allowed_f = (
            allowed_tx
            | {f"y{i + 1}" for i in range(m)}
            | {f"z{b + 1}" for b in range(d)}
            | ({"y"} if m == 1 else set())
            | ({"z"} if d == 1 else set())
        )
        allowed_h = allowed_tx - {"t"}
        for label, exprs, allowed in (
            ("drift", self.drift, allowed_tx),
            ("diffusion", [e for r in self.diffusion for e in r], allowed_tx),
            ("costs", [e for r in self.costs for e in r], allowed_tx),
            ("drivers", self.drivers, allowed_f),
            ("terminals", self.terminals, allowed_h),
        ):
            for e in exprs:
                bad = e.free_vars - allowed
                if bad:
                    raise ValueError(f"{label} expression {format_expression(e)!r} uses undeclared variable(s) {sorted(bad)}")

    @property
    def k(self) -> int:
        return self.state_dim

    @property
    def d(self) -> int:
        return self.brownian_dim

    @property
    def m(self) -> int:
        return self.mode_count

    @property
    def T(self) -> float:
        return self.horizon

    # -- evaluation helpers (broadcasting over arrays of nodes) ---------------

    def _tx_env(self, t, x) -> dict:
        x = np.asarray(x, dtype=float)
        env = {"t": t}
        for a in range(self.k):
            env[f"x{a + 1}"] = x[..., a]
        if self.k == 1:
            env["x"] = env["x1"]
        return env

    @staticmethod
    def _fill(value, shape):
        return np.broadcast_to(np.asarray(value, dtype=float), shape).astype(float)

    def drift_at(self, t, x) -> np.ndarray:
        """b(t, x) with shape x.shape[:-1] + (k,)."""
        x = np.asarray(x, dtype=float)
        env = self._tx_env(t, x)
        return np.stack([self._fill(e.evaluate(env), x.shape[:-1]) for e in self.drift], axis=-1)

    def diffusion_at(self, t, x) -> np.ndarray:
        """sigma(t, x) with shape x.shape[:-1] + (k, d)."""
        x = np.asarray(x, dtype=float)
        env = self._tx_env(t, x)
        rows = [np.stack([self._fill(e.evaluate(env), x.shape[:-1]) for e in row], axis=-1) for row in self.diffusion]
        return np.stack(rows, axis=-2)

    def cost_at(self, i: int, j: int, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._fill(self.costs[i][j].evaluate(self._tx_env(t, x)), x.shape[:-1])

    def terminal_at(self, i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._fill(self.terminals[i].evaluate(self._tx_env(0.0, x)), x.shape[:-1])

    def driver_at(self, i: int, t, x, y, z) -> np.ndarray:
        """f_i(t, x, y, z); y has trailing axis m, z trailing axis d."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        env = self._tx_env(t, x)
        for l in range(self.m):
            env[f"y{l + 1}"] = y[..., l]
        for b in range(self.d):
            env[f"z{b + 1}"] = z[..., b]
        if self.m == 1:
            env["y"] = env["y1"]
        if self.d == 1:
            env["z"] = env["z1"]
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], z.shape[:-1])
        return self._fill(self.drivers[i].evaluate(env), shape)

    def driver_uses(self, prefix: str) -> bool:
        """True when some driver references a y- or z-variable (prefix 'y' or 'z')."""
        return any(v.startswith(prefix) for f in self.drivers for v in f.free_vars)

    def is_time_independent(self) -> bool:
        exprs = list(self.drift) + [e for r in self.diffusion for e in r]
        return all("t" not in e.free_vars for e in exprs)

    def replace(self, **changes) -> "SwitchingProblem":
        return dataclasses.replace(self, **changes)


def _as_expr(e) -> Expr:
    if isinstance(e, Expr):
        return e
    return parse_expression(str(e))


def build_problem(
    *,
    k: int = 1,
    d: int | None = None,
    T: float = 1.0,
    drift: Sequence = ("0",),
    diffusion: Sequence = (("1",),),
    drivers: Sequence,
    costs: Sequence | None = None,
    terminals: Sequence,
    lipschitz: float = 0.0,
    growth: int = 1,
) -> SwitchingProblem:
    """Convenience constructor taking expression strings."""
    m = len(drivers)
    if d is None:
        d = len(diffusion[0])
    if costs is None:
        if m != 1:
            raise ValueError("costs required when m > 1")
        costs = (("0",),)
    return SwitchingProblem(
        state_dim=k,
        brownian_dim=d,
        mode_count=m,
        horizon=float(T),
        drift=tuple(_as_expr(e) for e in drift),
        diffusion=tuple(tuple(_as_expr(e) for e in row) for row in diffusion),
        drivers=tuple(_as_expr(e) for e in drivers),
        costs=tuple(tuple(_as_expr(e) for e in row) for row in costs),
        terminals=tuple(_as_expr(e) for e in terminals),
        lipschitz_const=float(lipschitz),
        growth_exponent=int(growth),
    )


# --------------------------------------------------------------------------- problem files

SECTIONS = ("problem", "drift", "diffusion", "drivers", "costs", "terminals", "constants")
_LINE_RE = re.compile(r"^(?P<key>[A-Za-z_][A-Za-z0-9_]*)\s*=\s*(?P<value>.*?)\s*$")


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        if ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def parse_problem(text: str) -> SwitchingProblem:
    """Parse a problem file (see README for the format)."""
    entries: dict[str, dict[str, tuple]] = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ProblemFileError("unterminated section header", lineno, raw.index("[") + 1)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ProblemFileError(f"unknown section [{section}]", lineno, raw.index("[") + 1)
            continue
        m = _LINE_RE.match(line.strip())
        if m is None:
            raise ProblemFileError("expected 'key = value'", lineno, len(line) - len(line.lstrip()) + 1)
        if section is None:
            raise ProblemFileError("entry before any section header", lineno, 1)
        key, value = m.group("key"), m.group("value")
        vcol = line.index("=") + 1
        vcol += len(line[vcol:]) - len(line[vcol:].lstrip()) + 1
        if key in entries[section]:
            raise ProblemFileError(f"duplicate key {key!r} in [{section}]", lineno, 1)
        entries[section][key] = (value, lineno, vcol)

    def number(sec, key, kind=float, default=None):
        if key not in entries[sec]:
            if default is None:
                raise ProblemFileError(f"missing mandatory field {sec}.{key}")
            return default
        value, ln, col = entries[sec][key]
        try:
            return kind(value.strip('"'))
        except ValueError:
            raise ProblemFileError(f"{sec}.{key} must be a {kind.__name__}, got {value!r}", ln, col) from None

    def expression(sec, key):
        value, ln, col = entries[sec][key]
        if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
            body, offset = value[1:-1], col + 1
        elif re.fullmatch(r"[0-9.eE+-]+", value):
            body, offset = value, col
        else:
            raise ProblemFileError(f"expression for {sec}.{key} must be a quoted string", ln, col)
        try:
            return parse_expression(body)
        except ExpressionSyntaxError as exc:
            raise ProblemFileError(f"syntax error in {sec}.{key}: {exc.args[0]}", ln, offset + exc.position) from None

    k = number("problem", "k", int)
    m = number("problem", "m", int)
    d = number("problem", "d", int, default=k)
    T = number("problem", "T", float)
    if k < 1 or m < 1 or d < 1:
        raise ProblemFileError("k, d and m must be positive integers")
    if not T > 0:
        raise ProblemFileError("T must be positive")

    def indexed(sec, stem, shape, aliases=()):
        """Collect keys stem<i>[<j>] (1-based) into a nested list; reject strays."""
        found = {}
        for key in entries[sec]:
            if key in aliases:
                found[(0,) * len(shape)] = key
                continue
            mm = re.fullmatch(stem + r"(\d+)(?:_(\d+))?", key)
            if mm is None:
                _, ln, _ = entries[sec][key]
                raise ProblemFileError(f"unexpected key {key!r} in [{sec}]", ln, 1)
            if len(shape) == 1:
                if mm.group(2) is not None:
                    raise ProblemFileError(f"unexpected key {key!r} in [{sec}]", entries[sec][key][1], 1)
                idx = (int(mm.group(1)) - 1,)
            elif mm.group(2) is not None:
                idx = (int(mm.group(1)) - 1, int(mm.group(2)) - 1)
            elif len(mm.group(1)) == 2:
                idx = (int(mm.group(1)[0]) - 1, int(mm.group(1)[1]) - 1)
            else:
                raise ProblemFileError(f"cannot read indices of {key!r}; use {stem}<i>_<j>", entries[sec][key][1], 1)
            if any(i < 0 or i >= n for i, n in zip(idx, shape)):
                raise ProblemFileError(
                    f"dimension mismatch: {sec}.{key} outside declared size {'x'.join(map(str, shape))}",
                    entries[sec][key][1],
                    1,
                )
            if idx in found:
                raise ProblemFileError(f"duplicate entry for {sec} index {idx}", entries[sec][key][1], 1)
            found[idx] = key
        return found

    drift_keys = indexed("drift", "b", (k,), aliases=("b",) if k == 1 else ())
    diff_keys = indexed("diffusion", "sigma", (k, d), aliases=("sigma",) if k == d == 1 else ())
    f_keys = indexed("drivers", "f", (m,))
    h_keys = indexed("terminals", "h", (m,))
    g_keys = indexed("costs", "g", (m, m))

    def need(found, sec, stem, idx):
        if idx not in found:
            label = stem + "".join(str(i + 1) for i in idx) if max(idx) < 9 else stem + "_".join(str(i + 1) for i in idx)
            raise ProblemFileError(f"missing mandatory field {sec}.{label}")
        return expression(sec, found[idx])

    drift = tuple(need(drift_keys, "drift", "b", (a,)) for a in range(k))
    diffusion = tuple(tuple(need(diff_keys, "diffusion", "sigma", (a, b)) for b in range(d)) for a in range(k))
    drivers = tuple(need(f_keys, "drivers", "f", (i,)) for i in range(m))
    terminals = tuple(need(h_keys, "terminals", "h", (i,)) for i in range(m))
    if m == 1 and not g_keys:
        costs = ((parse_expression("0"),),)
    else:
        rows = []
        for i in range(m):
            row = []
            for j in range(m):
                if (i, j) not in g_keys:
                    if (j, i) in g_keys:
                        raise ProblemFileError(f"missing cost pair: g{i + 1}{j + 1} (g{j + 1}{i + 1} is given)")
                    raise ProblemFileError(f"missing mandatory field costs.g{i + 1}{j + 1}")
                row.append(expression("costs", g_keys[(i, j)]))
            rows.append(tuple(row))
        costs = tuple(rows)

    depends = any(v[0] in "yz" for f in drivers for v in f.free_vars)
    if "lipschitz" in entries["constants"]:
        C = number("constants", "lipschitz", float)
    elif depends:
        raise ProblemFileError("missing mandatory field constants.lipschitz (drivers depend on y or z)")
    else:
        C = 0.0
    p = number("constants", "growth", int, default=1)
    for key in entries["constants"]:
        if key not in ("lipschitz", "growth"):
            raise ProblemFileError(f"unexpected key {key!r} in [constants]", entries["constants"][key][1], 1)
    for key in entries["problem"]:
        if key not in ("k", "d", "m", "T"):
            raise ProblemFileError(f"unexpected key {key!r} in [problem]", entries["problem"][key][1], 1)

    try:
        return SwitchingProblem(k, d, m, T, drift, diffusion, drivers, costs, terminals, C, p)
    except ValueError as exc:
        raise ProblemFileError(f"invalid problem: {exc}") from None


def load_problem(path) -> SwitchingProblem:
    with open(path, encoding="utf-8") as fh:
        return parse_problem(fh.read())


def format_problem(p: SwitchingProblem) -> str:
    """Inverse of parse_problem (up to comments and layout)."""
    sep = "" if max(p.k, p.d, p.m) <= 9 else "_"
    q = lambda e: '"' + format_expression(e) + '"'
    lines = ["[problem]", f"k = {p.k}", f"d = {p.d}", f"m = {p.m}", f"T = {p.T!r}", "", "[drift]"]
    lines += [f"b{a + 1} = {q(e)}" for a, e in enumerate(p.drift)]
    lines += ["", "[diffusion]"]
    lines += [f"sigma{a + 1}{sep}{b + 1} = {q(e)}" for a, row in enumerate(p.diffusion) for b, e in enumerate(row)]
    lines += ["", "[drivers]"] + [f"f{i + 1} = {q(e)}" for i, e in enumerate(p.drivers)]
    lines += ["", "[costs]"]
    lines += [f"g{i + 1}{sep}{j + 1} = {q(e)}" for i, row in enumerate(p.costs) for j, e in enumerate(row)]
    lines += ["", "[terminals]"] + [f"h{i + 1} = {q(e)}" for i, e in enumerate(p.terminals)]
    lines += ["", "[constants]", f"lipschitz = {p.lipschitz_const!r}", f"growth = {p.growth_exponent}", ""]
    return "\n".join(lines)


# --------------------------------------------------------------------------- validation


@dataclass
class Violation:
    check: str
    t: float | None
    x: tuple
    witness: tuple
    slack: float


@dataclass
class ValidationReport:
    name: str
    violations: list = field(default_factory=list)
    checked: int = 0
    min_slack: float | None = None

    @property
    def passed(self) -> bool:
        return not self.violations

    def _track(self, slack: float):
        if self.min_slack is None or slack < self.min_slack:
            self.min_slack = float(slack)

    def to_text(self) -> str:
        lines = [
            f"report: {self.name}",
            f"passed: {str(self.passed).lower()}",
            f"checked: {self.checked}",
            f"min_slack: {self.min_slack!r}",
            f"violations: {len(self.violations)}",
        ]
        for v in self.violations:
            lines += [
                "",
                f"check: {v.check}",
                f"t: {v.t!r}",
                f"x: {' '.join(repr(float(c)) for c in v.x)}",
                f"witness: {'-'.join(str(w) for w in v.witness)}",
                f"slack: {v.slack!r}",
            ]
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        rows = ["check,t,x,witness,slack"]
        for v in self.violations:
            t = "" if v.t is None else repr(v.t)
            rows.append(f"{v.check},{t},{' '.join(repr(float(c)) for c in v.x)},{'-'.join(map(str, v.witness))},{v.slack!r}")
        return "\n".join(rows) + "\n"


def simple_cycles(m: int):
    """Simple cycles of length >= 2 over modes 0..m-1, each listed once
    (rotation starting at its smallest mode, both orientations kept)."""
    for length in range(2, m + 1):
        for subset in itertools.combinations(range(m), length):
            head, rest = subset[0], subset[1:]
            for perm in itertools.permutations(rest):
                yield (head,) + perm


def _as_samples_tx(samples, k):
    out = []
    for t, x in samples:
        out.append((float(t), tuple(float(c) for c in np.atleast_1d(np.asarray(x, dtype=float)).reshape(k))))
    return out


def check_non_free_loop(p: SwitchingProblem, samples: Iterable) -> ValidationReport:
    """Zero diagonal, nonnegative off-diagonal costs and strictly positive
    cost around every simple cycle, at each sampled (t, x)."""
    if p.m > 8:
        raise ValueError("cycle enumeration limited to m <= 8")
    rep = ValidationReport("non_free_loop")
    cycles = list(simple_cycles(p.m))
    for t, x in _as_samples_tx(samples, p.k):
        xa = np.asarray(x)
        g = np.array([[float(p.cost_at(i, j, t, xa)) for j in range(p.m)] for i in range(p.m)])
        for i in range(p.m):
            rep.checked += 1
            if g[i, i] != 0.0:
                rep.violations.append(Violation("nonzero_diagonal", t, x, (i + 1, i + 1), -abs(g[i, i])))
            for j in range(p.m):
                if i != j:
                    rep._track(g[i, j])
                    if g[i, j] < 0:
                        rep.violations.append(Violation("negative_cost", t, x, (i + 1, j + 1), float(g[i, j])))
        for cyc in cycles:
            rep.checked += 1
            total = 0.0
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                total += g[a, b]
            rep._track(total)
            if not total > 0:
                rep.violations.append(
                    Violation("free_loop", t, x, tuple(c + 1 for c in cyc) + (cyc[0] + 1,), float(total))
                )
    return rep


def check_terminal_consistency(p: SwitchingProblem, samples: Iterable) -> ValidationReport:
    """h_i(x) >= h_j(x) - g_ij(T, x) for every i != j at each sampled x."""
    rep = ValidationReport("terminal_consistency")
    for x in samples:
        xa = np.atleast_1d(np.asarray(x, dtype=float)).reshape(p.k)
        h = [float(p.terminal_at(i, xa)) for i in range(p.m)]
        for i in range(p.m):
            for j in range(p.m):
                if i == j:
                    continue
                rep.checked += 1
                slack = h[i] - (h[j] - float(p.cost_at(i, j, p.T, xa)))
                rep._track(slack)
                if slack < 0:
                    rep.violations.append(Violation("terminal_inconsistent", p.T, tuple(float(c) for c in xa), (i + 1, j + 1), slack))
    return rep


def check_cooperative(p: SwitchingProblem, samples: Iterable, y_box=(-1.0, 1.0), z_box=(-1.0, 1.0), n_probes=8, seed=0):
    """Spot check that f_i is nondecreasing in y_j for j != i."""
    rng = np.random.default_rng(seed)
    rep = ValidationReport("cooperative_drivers")
    for t, x in _as_samples_tx(samples, p.k):
        xa = np.asarray(x)
        for _ in range(n_probes):
            y = rng.uniform(*y_box, size=p.m)
            z = rng.uniform(*z_box, size=p.d)
            step = rng.uniform(0.01, 0.5 * (y_box[1] - y_box[0]))
            for i in range(p.m):
                base = float(p.driver_at(i, t, xa, y, z))
                for j in range(p.m):
                    if j == i:
                        continue
                    y2 = y.copy()
                    y2[j] += step
                    rep.checked += 1
                    slack = float(p.driver_at(i, t, xa, y2, z)) - base
                    rep._track(slack)
                    if slack < -1e-12:
                        rep.violations.append(Violation("non_cooperative", t, x, (i + 1, j + 1), slack))
    return rep


@dataclass(frozen=True)
class ProbeBox:
    """Sampling box for Lipschitz probes: x per dimension, y and z per coordinate."""

    x: tuple
    y: tuple = (-1.0, 1.0)
    z: tuple = (-1.0, 1.0)


def estimate_lipschitz(p: SwitchingProblem, probe_box: ProbeBox, n_probes: int = 1000, seed: int = 0, per_mode=False):
    """Largest observed |f_i(y,z) - f_i(y',z')| / (|y - y'| + |z - z'|).

    A lower bound on the true constant; ``per_mode=True`` returns one value
    per driver instead of the maximum.
    """
    if n_probes < 2:
        raise ValueError("n_probes must be >= 2")
    rng = np.random.default_rng(seed)
    n = n_probes
    t = rng.uniform(0.0, p.T, size=n)
    xbox = list(probe_box.x)
    if len(xbox) == 1 and p.k > 1:
        xbox = xbox * p.k
    x = np.stack([rng.uniform(lo, hi, size=n) for lo, hi in xbox], axis=-1)
    y1 = rng.uniform(*probe_box.y, size=(n, p.m))
    y2 = rng.uniform(*probe_box.y, size=(n, p.m))
    z1 = rng.uniform(*probe_box.z, size=(n, p.d))
    z2 = rng.uniform(*probe_box.z, size=(n, p.d))
    # a quarter of the probes move only y or only z, so one-sided slopes are seen
    q = n // 4
    y2[:q] = y1[:q]
    z2[q : 2 * q] = z1[q : 2 * q]
    dist = np.linalg.norm(y1 - y2, axis=1) + np.linalg.norm(z1 - z2, axis=1)
    keep = dist > 0
    out = []
    for i in range(p.m):
        f1 = p.driver_at(i, t, x, y1, z1)
        f2 = p.driver_at(i, t, x, y2, z2)
        ratio = np.abs(f1 - f2)[keep] / dist[keep]
        out.append(float(ratio.max()) if ratio.size else 0.0)
    return out if per_mode else max(out)
