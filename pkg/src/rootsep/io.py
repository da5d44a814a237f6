"""Artifact writers: plot-ready CSVs, JSON sidecars, content hashes.

All CSVs use '.' decimals, LF line endings, and a header line.  JSON is
written with sorted keys so identical runs produce identical bytes; wall
clock data goes to a separate unhashed file.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def _fmt(v: float) -> str:
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(float(v), ".17g")


def write_surface_csv(surface, path) -> None:
    """Rows `j,s,t,x,u,obstacle_gap`, row-major in (j, t, x), kept rows only."""
    xs = surface.x_nodes()
    gaps = surface.obstacle_gap()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("j,s,t,x,u,obstacle_gap\n")
        for j in range(surface.n + 1):
            s = surface.partition.points[j]
            for ti, t in enumerate(surface.t_kept):
                u_row = surface.layers[j, ti]
                g_row = gaps[j - 1, ti] if j >= 1 else np.zeros_like(u_row)
                for xi, x in enumerate(xs):
                    fh.write(f"{j},{_fmt(s)},{_fmt(t)},{_fmt(x)},"
                             f"{_fmt(u_row[xi])},{_fmt(g_row[xi])}\n")


def write_limit_csv(limit, path) -> None:
    """Rows `s,t,x,u,level` for the finest refinement level."""
    level = limit.history[-1]["n"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("s,t,x,u,level\n")
        for a, s in enumerate(limit.lattice_s):
            for b, t in enumerate(limit.lattice_t):
                for c, x in enumerate(limit.lattice_x):
                    fh.write(f"{_fmt(s)},{_fmt(t)},{_fmt(x)},"
                             f"{_fmt(limit.values[a, b, c])},{level}\n")


def write_paths_csv(ensemble, path) -> None:
    """Raw dump `path,j,sigma,b_sigma`; gate behind an explicit flag upstream."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path,j,sigma,b_sigma\n")
        for j in range(1, ensemble.n + 1):
            sg = ensemble.sigma[j]
            bg = ensemble.b_sigma[j]
            for i in range(ensemble.M):
                bs = "nan" if np.isnan(bg[i]) else _fmt(bg[i])
                fh.write(f"{i},{j},{_fmt(sg[i])},{bs}\n")


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=True)
        fh.write("\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def jsonable(obj):
    """Recursively convert numpy scalars/arrays for JSON output."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        if np.isnan(v):
            return "nan"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
