"""Flat text outputs: surface files, convergence logs and JSON documents."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fd import ValueField


def surface_header(k: int, d: int) -> list:
    return ["t"] + [f"x{a + 1}" for a in range(k)] + ["u"] + [f"z{b + 1}" for b in range(d)] + ["dK", "active"]


def emit_surface_csv(fld: ValueField, stem, modes: Optional[Sequence[int]] = None) -> list:
    """Write ``<stem>_mode<i>.csv`` per mode (1-based) plus ``<stem>_meta.json``.

    Floats are written with ``repr`` so they read back bit-exactly.
    Returns the written paths.
    """
    modes = list(range(1, fld.m + 1)) if modes is None else list(modes)
    if not modes:
        raise ValueError("no modes selected for export")
    if any(not 1 <= i <= fld.m for i in modes):
        raise ValueError(f"modes must lie in 1..{fld.m}")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    g = fld.grid
    pts = g.points
    d = fld.gradients.shape[-1]
    written = []
    for i in modes:
        path = stem.parent / f"{stem.name}_mode{i}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(surface_header(g.k, d))
            for n, t in enumerate(g.times):
                u = fld.values[i - 1, n]
                z = fld.gradients[i - 1, n]
                dk = fld.reflection_increments[i - 1, n]
                act = fld.active_obstacle[i - 1, n]
                for r in range(g.n_nodes):
                    w.writerow(
                        [repr(float(t))]
                        + [repr(float(c)) for c in pts[r]]
                        + [repr(float(u[r]))]
                        + [repr(float(c)) for c in z[r]]
                        + [repr(float(dk[r])), str(int(act[r]))]
                    )
        written.append(path)
    meta = {"grid": g.describe(), "modes": modes, "brownian_dim": d}
    if fld.options is not None:
        o = fld.options
        meta["scheme"] = {
            "theta": o.theta,
            "obstacle_inner_max_sweeps": o.obstacle_inner_max_sweeps,
            "obstacle_tolerance": o.obstacle_tolerance,
            "boundary": o.boundary,
            "gradient_stencil": o.gradient_stencil,
        }
    meta["max_inner_sweeps"] = int(fld.max_inner_sweeps)
    meta_path = stem.parent / f"{stem.name}_meta.json"
    write_json(meta_path, meta)
    written.append(meta_path)
    return written


def read_surface_csv(path) -> dict:
    """Column name -> numpy array (``active`` as int)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    out = {}
    for c, name in enumerate(head):
        col = [r[c] for r in body]
        out[name] = np.array([int(v) for v in col]) if name == "active" else np.array([float(v) for v in col])
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_convergence_log(path, records: list) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["q", "alpha_distance", "inf_distance", "ratio", "wall_time"])
        for r in records:
            ratio = "" if r["ratio"] is None else repr(float(r["ratio"]))
            w.writerow([r["q"], repr(float(r["alpha_distance"])), repr(float(r["inf_distance"])), ratio, f"{r['wall_time']:.6f}"])
    return path


def write_table(path, header: list, rows: list) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["n/a" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])
    return path
