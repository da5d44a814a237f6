"""Barrier extraction from solved layer surfaces.

A discrete stopping region is summarized by the first-hit curve
r_j(x) = first time the node column x is stopped in layer j, with a +inf
sentinel for columns never stopped before the horizon.  First-hit curves are
right-barriers by construction; nodes that leave the region again after the
first hit are numerical noise, counted and overridden.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ExtractionUnstableError, ValidationError
from .stop_solver import SENTINEL, ValueSurface
from .tolerances import EXTRACT_FLAG_FRACTION


@dataclass
class BarrierFamily:
    """Per-layer first-stopped times r_j on the space nodes (inf: beyond horizon)."""

    s_values: np.ndarray          # layer indices s_1..s_n
    x_nodes: np.ndarray
    r: np.ndarray                 # (n, nx+1), +inf sentinel
    eps_b: Optional[float]        # None: the scheme's own stop decision
    flagged: np.ndarray
    region_nodes: np.ndarray
    grid_desc: dict
    family_desc: dict

    _HUGE = 1e18   # stands in for the +inf sentinel during interpolation

    @property
    def n(self) -> int:
        return len(self.s_values)

    def _table(self, j: int):
        """Clamped interpolation table and isolated finite columns, cached."""
        cache = getattr(self, "_tables", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_tables", cache)
        if j not in cache:
            r = self.r[j - 1]
            clamped = np.where(np.isfinite(r), r, self._HUGE)
            fin = np.isfinite(r)
            inner = fin[1:-1] & ~fin[:-2] & ~fin[2:]
            iso = [(float(self.x_nodes[i + 1]), float(r[i + 1]))
                   for i in np.nonzero(inner)[0]]
            # sparse range-min table: T[k, i] = min of clamped[i : i + 2^k]
            n = clamped.size
            levels = max(1, int(np.log2(max(n, 2))) + 1)
            T = np.full((levels, n), self._HUGE)
            T[0] = clamped
            for k in range(1, levels):
                span, half = 1 << k, 1 << (k - 1)
                m = n - span + 1
                if m <= 0:
                    break
                T[k, :m] = np.minimum(T[k - 1, :m], T[k - 1, half:half + m])
            cache[j] = (clamped, iso, T)
        return cache[j]

    def range_min(self, j: int, x_lo, x_hi) -> np.ndarray:
        """Lower bound of the barrier time over position spans [x_lo, x_hi].

        Exact minimum over the grid nodes touching the span, which bounds the
        interpolated barrier from below; used to prune hit tests."""
        clamped, _, T = self._table(j)
        xs = self.x_nodes
        dx = xs[1] - xs[0]
        n = clamped.size
        lo = np.clip(np.floor((np.asarray(x_lo) - xs[0]) / dx), 0, n - 1).astype(np.int64)
        hi = np.clip(np.ceil((np.asarray(x_hi) - xs[0]) / dx), 0, n - 1).astype(np.int64)
        length = hi - lo + 1
        k = np.frexp(length.astype(np.float64))[1] - 1      # floor(log2(length))
        k = np.clip(k, 0, T.shape[0] - 1)
        left = np.take(T.ravel(), k * n + lo)
        right = np.take(T.ravel(), k * n + hi - (1 << k) + 1)
        return np.minimum(left, right)

    def lookup(self, j: int, x) -> np.ndarray:
        """Barrier time at arbitrary x for layer j (1-based).

        Linear interpolation between nodes; a cell with an infinite endpoint
        interpolates to effectively +inf, except within dx/2 of an isolated
        finite column (a single-node stopping line, e.g. an atom of the
        target), which keeps its own finite value so paths can reach it.
        """
        clamped, iso, _ = self._table(j)
        xs = self.x_nodes
        dx = xs[1] - xs[0]
        x = np.asarray(x, dtype=float)
        pos = np.clip((x - xs[0]) / dx, 0.0, len(xs) - 1.000001)
        i0 = pos.astype(np.int64)
        w = pos - i0
        r0 = np.take(clamped, i0)
        out = r0 + w * (np.take(clamped, i0 + 1) - r0)
        for xv, rv in iso:
            close = np.abs(x - xv) <= dx / 2.0
            if close.any():
                out = np.where(close, np.minimum(out, rv), out)
        return out

    def descriptor(self) -> dict:
        return {"eps_b": self.eps_b, "flagged": self.flagged.tolist(),
                "region_nodes": self.region_nodes.tolist()}


def extract(surface: ValueSurface, eps_b: Optional[float] = None) -> BarrierFamily:
    """Extract the per-layer stopping regions from a solved surface.

    By default a node belongs to the region exactly when the scheme's own
    update chose the obstacle branch (ties stop); this matches the region
    definition without a resolution-dependent threshold.  Passing eps_b
    re-thresholds the stored obstacle gaps instead, which requires a surface
    with every time row kept.
    """
    grid = surface.grid
    ts = grid.t_nodes()
    if eps_b is None:
        first = surface.stop_first
        flagged = surface.flagged.copy()
        region = surface.region_nodes.copy()
    else:
        if not surface.full_rows:
            raise ValidationError("threshold extraction needs a surface with all rows kept")
        gap = surface.obstacle_gap()
        stopped = gap <= eps_b
        nt1 = stopped.shape[1]
        first = np.full((surface.n, stopped.shape[2]), SENTINEL, dtype=np.int32)
        flagged = np.zeros(surface.n, dtype=np.int64)
        region = np.zeros(surface.n, dtype=np.int64)
        for j in range(surface.n):
            any_hit = stopped[j].any(axis=0)
            fm = np.where(any_hit, stopped[j].argmax(axis=0), SENTINEL)
            first[j] = fm
            rows = np.arange(nt1)[:, None]
            above = rows >= fm[None, :]
            flagged[j] = int(np.count_nonzero(above & ~stopped[j] & any_hit[None, :]))
            region[j] = int(np.where(any_hit, nt1 - fm, 0).sum())

    r = np.where(first == SENTINEL, np.inf, ts[np.minimum(first, len(ts) - 1)])
    # boundary columns inherit their interior neighbour: the Dirichlet rows
    # are prescribed data, not a stopping decision
    r[:, 0] = r[:, 1]
    r[:, -1] = r[:, -2]
    frac = flagged / np.maximum(region, 1)
    if np.any(frac > EXTRACT_FLAG_FRACTION):
        worst = int(np.argmax(frac))
        raise ExtractionUnstableError(
            f"layer {worst + 1}: {flagged[worst]} non-monotone nodes over "
            f"{region[worst]} region nodes ({frac[worst]:.2%}); grid too coarse")
    return BarrierFamily(s_values=surface.partition.points[1:].copy(),
                         x_nodes=surface.x_nodes(), r=r,
                         eps_b=eps_b, flagged=flagged, region_nodes=region,
                         grid_desc=grid.descriptor(), family_desc=surface.family_desc)


@dataclass
class OrderingReport:
    ordered: bool
    violations: list

    def __bool__(self):
        return self.ordered


def ordering_check(barrier_family: BarrierFamily, tol: float = 0.0,
                   x_window=None) -> OrderingReport:
    """Regions shrink with the layer index iff r_j <= r_{j+1} everywhere.

    An x_window restricts the check to columns where the layer increments
    are resolvable; far outside the support the first-hit times ride on
    float-scale obstacle differences and carry no ordering information.
    """
    viol = []
    r = barrier_family.r
    xs = barrier_family.x_nodes
    mask = np.ones_like(xs, dtype=bool) if x_window is None \
        else (xs >= x_window[0]) & (xs <= x_window[1])
    for j in range(barrier_family.n - 1):
        a, b = r[j], r[j + 1]
        bad = (a > b + tol) & ~(np.isinf(a) & np.isinf(b)) & mask
        for i in np.nonzero(bad)[0]:
            viol.append((j + 1, float(xs[i])))
    return OrderingReport(ordered=not viol, violations=viol)


def analytic_compare(barrier_family: BarrierFamily, analytic, x_window=None) -> float:
    """Sup distance between extracted and analytic barrier curves.

    `analytic` maps (j, x_nodes) to barrier times; inf-vs-inf counts as 0.
    """
    xs = barrier_family.x_nodes
    mask = np.ones_like(xs, dtype=bool) if x_window is None \
        else (xs >= x_window[0]) & (xs <= x_window[1])
    worst = 0.0
    for j in range(1, barrier_family.n + 1):
        ref = np.asarray(analytic(j, xs), dtype=float)
        got = barrier_family.r[j - 1]
        both_inf = np.isinf(ref) & np.isinf(got)
        d = np.abs(np.where(both_inf, 0.0, got) - np.where(both_inf, 0.0, ref))
        d = np.where(np.isnan(d), np.inf, d)
        worst = max(worst, float(d[mask].max()))
    return worst


def write_barriers_csv(barrier_family: BarrierFamily, path) -> None:
    """Dump `j,s,x,r` rows; the sentinel is written as `inf`."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("j,s,x,r\n")
        for j in range(barrier_family.n):
            s = barrier_family.s_values[j]
            for x, rv in zip(barrier_family.x_nodes, barrier_family.r[j]):
                rs = "inf" if np.isinf(rv) else format(rv, ".17g")
                fh.write(f"{j + 1},{s:.17g},{x:.17g},{rs}\n")
