"""Layered optimal-stopping solver on an explicit monotone grid.

Each marginal layer j solves a Bermudan-style obstacle iteration forward in
path time t:

    v_j(t, x) = max( v_{j-1}(t, x) + dU_j(x),  (v_j(t-dt, x-dx) + v_j(t-dt, x+dx)) / 2 )

with v_j(0, .) = v_0 = U(0, .), obstacle increment dU_j = U(s_j, .) - U(s_{j-1}, .),
and Dirichlet value U(s_j, +-L) on the space boundary.  With dt = dx^2 the
continuation branch is the symmetric random-walk average, so the scheme is
monotone and consistent; the stop branch realizes the sup over stopping with
the early-collection bonus active strictly before the budget runs out.

The solve records, online and per layer:
  * the first stopped time index per space column (the raw barrier),
  * later un-stopped nodes above that first hit (monotonicity flags),
  * complementarity residuals with a centred-in-x, backward-in-t stencil,
    which is deliberately *not* the scheme's own update stencil so the
    report measures genuine discretization error instead of zeros.

Ties between stopping and continuing are marked as stopped: barriers are
closed sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import GridBudgetError, ValidationError
from .grid import Partition, SpaceTimeGrid
from .marginals import MarginalFamily, convex_order_error, convex_order_validate, make_stream
from .tolerances import (INTERIOR_T_FRACTION, KINK_GUARD, SCHEME_C,
                         STOP_DECISION_GAP)

SENTINEL = np.iinfo(np.int32).max


def scheme_tolerance(grid: SpaceTimeGrid) -> float:
    """Frozen complementarity tolerance c (dx + dt)."""
    return SCHEME_C * (grid.dx + grid.dt)


@dataclass
class LayerStats:
    s_prev: float
    s_val: float
    max_heat_unstopped: float = 0.0
    min_gap: float = 0.0
    max_min_residual: float = 0.0
    both_exceed: int = 0
    interior_nodes: int = 0
    pde_max: float = 0.0
    pde_loc: tuple = (0.0, 0.0)


@dataclass
class ValueSurface:
    """Solved layer values on kept time rows plus online solve records."""

    partition: Partition
    grid: SpaceTimeGrid
    family_desc: dict
    t_kept: np.ndarray                 # kept time values, ascending
    kept_index: np.ndarray             # their indices on the full time axis
    layers: np.ndarray                 # (n+1, len(t_kept), nx+1)
    du: np.ndarray                     # (n, nx+1) obstacle increments
    stop_first: np.ndarray             # (n, nx+1) first stopped time index (SENTINEL: never)
    flagged: np.ndarray                # (n,) un-stopped nodes above the first hit
    region_nodes: np.ndarray           # (n,) node count at/after the first hit
    layer_stats: list
    tol: float
    full_rows: bool                    # True when every time row is kept
    resid_mask: np.ndarray = None      # interior columns used for residual maxima

    @property
    def n(self) -> int:
        return self.partition.n

    def x_nodes(self) -> np.ndarray:
        return self.grid.x_nodes()

    def _t_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.t_kept - t)))
        if abs(self.t_kept[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError(f"time {t} not among kept rows")
        return idx

    def value_at(self, j: int, t: float, x: float) -> float:
        xs = self.x_nodes()
        i = int(round((x + self.grid.L) / self.grid.dx))
        if not (0 <= i < xs.size) or abs(xs[i] - x) > 1e-9:
            raise ValidationError(f"x={x} is not a grid node")
        return float(self.layers[j, self._t_index(t), i])

    def obstacle_gap(self) -> np.ndarray:
        """Per-node (layer increment - obstacle increment) on kept rows."""
        return self.layers[1:] - self.layers[:-1] - self.du[:, None, :]


@dataclass
class ComplementarityReport:
    max_heat_unstopped: float
    max_obstacle_violation: float
    frac_both_exceed: float
    max_min_residual: float
    tol: float
    per_layer: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.max_min_residual <= self.tol
                and self.max_heat_unstopped <= self.tol
                and self.max_obstacle_violation <= self.tol)


def solve_layers(family: MarginalFamily, partition: Partition, grid: SpaceTimeGrid,
                 keep_times=None) -> ValueSurface:
    """March the layered obstacle scheme across all marginal layers.

    keep_times: time values whose rows are retained in the result (None keeps
    every row).  The previous layer is always held at full resolution while
    the next one is computed, so memory stays at two full (t, x) panels.
    """
    report = convex_order_validate(family, s_probes=partition.points)
    if not report.passed:
        raise convex_order_error(report)

    xs = grid.x_nodes()
    ts = grid.t_nodes()
    nt, nx = grid.nt, grid.nx
    dt, dx = grid.dt, grid.dx
    lam = grid.lam
    family = family.snapped(xs)

    svals = partition.points
    n = partition.n
    pots = np.stack([family.potential(float(s), xs) for s in svals])
    du = pots[1:] - pots[:-1]
    worst = float(du.max(initial=-np.inf))
    if worst > 1e-9:
        from .errors import ConvexOrderError
        k = np.unravel_index(int(du.argmax()), du.shape)
        raise ConvexOrderError(
            f"obstacle increment positive ({worst:.3e}) at layer {k[0] + 1}, x={xs[k[1]]:.4g}")

    if keep_times is None:
        if (n + 1) * (nt + 1) * (nx + 1) > 150_000_000:
            raise GridBudgetError(
                "full-surface storage would exceed the memory budget; pass keep_times")
        kept_index = np.arange(nt + 1)
    else:
        kept_index = np.unique(np.round(np.asarray(keep_times, dtype=float) / dt).astype(int))
        if np.any(kept_index < 0) or np.any(kept_index > nt):
            raise ValidationError("keep_times outside the grid horizon")
        if not np.allclose(kept_index * dt, np.unique(np.asarray(keep_times, dtype=float)),
                           atol=1e-9):
            raise ValidationError("keep_times must be grid times")
    t_kept = ts[kept_index]
    keep_mask = np.zeros(nt + 1, dtype=bool)
    keep_mask[kept_index] = True
    keep_slot = np.cumsum(keep_mask) - 1

    tol = scheme_tolerance(grid)
    U0 = pots[0]
    # atom columns of the marginals are kink lines of the value surface
    # (absorbed point masses) with onset transients of node-scale width;
    # centred stencils are pointwise inconsistent there, so residual maxima
    # stay a fixed guard band away from every atom column
    resid_mask = np.ones(nx - 1, dtype=bool)
    atom_pos = set()
    for s in svals:
        meas = family.atoms(float(s))
        if meas is not None:
            atom_pos.update(float(p) for p in meas.positions)
    guard = max(KINK_GUARD, 6 * dx)
    for ppos in atom_pos:
        near = np.abs(xs[1:-1] - ppos) <= guard
        resid_mask[near] = False
    layers = np.empty((n + 1, kept_index.size, nx + 1))
    layers[0] = U0[None, :]

    prev = np.empty((nt + 1, nx + 1))
    prev[:] = U0[None, :]
    cur = np.empty_like(prev)

    stop_first = np.full((n, nx + 1), SENTINEL, dtype=np.int32)
    flagged = np.zeros(n, dtype=np.int64)
    stats_all = []

    for j in range(1, n + 1):
        duj = du[j - 1]
        st = LayerStats(s_prev=float(svals[j - 1]), s_val=float(svals[j]))
        ds_j = float(svals[j] - svals[j - 1])
        first = stop_first[j - 1]
        # t = 0 row: prescribed data; a node is in the stopping region only
        # where the obstacle increment already vanishes (relative float scale,
        # so potentials coinciding on half-lines register exactly)
        cur[0] = U0
        tie0 = 1e-12 * (1.0 + np.abs(U0))
        first[np.abs(duj) <= tie0] = 0
        b_lo, b_hi = float(pots[j][0]), float(pots[j][-1])

        v = cur[0]
        fl = 0
        m_min = max(1, int(math.ceil(INTERIOR_T_FRACTION * nt)))
        for m in range(1, nt + 1):
            if lam >= 1.0 - 1e-12:
                cont = 0.5 * (v[:-2] + v[2:])
            else:
                cont = 0.5 * lam * (v[:-2] + v[2:]) + (1.0 - lam) * v[1:-1]
            obs_row = prev[m] + duj
            obs_int = obs_row[1:-1]
            # ties stop; the relative slack keeps float dust from unmarking
            # tail columns whose obstacle increment underflows
            stop_dec = obs_int >= cont - 1e-12 * (1.0 + np.abs(cont))
            row = cur[m]
            row[1:-1] = np.where(stop_dec, obs_int, cont)
            row[0] = b_lo
            row[-1] = b_hi

            interior_first = first[1:-1]
            newly = stop_dec & (interior_first == SENTINEL)
            if newly.any():
                interior_first[newly] = m
            # monotonicity flags: un-stopped above the first hit, ignoring
            # sub-resolution hover where the gap sits at float scale
            material = (cont - obs_int) > 1e-9 * (1.0 + np.abs(cont))
            fl += int(np.count_nonzero(~stop_dec & material & (interior_first < m)))
            if first[0] == SENTINEL:
                first[0] = m
            if first[-1] == SENTINEL:
                first[-1] = m

            gap = row[1:-1] - obs_int
            st.min_gap = min(st.min_gap, float(gap.min()))
            if m >= m_min:
                heat = (row[1:-1] - v[1:-1]) / dt \
                    - (row[2:] - 2.0 * row[1:-1] + row[:-2]) / (2.0 * dx * dx)
                unstopped = ~stop_dec & resid_mask
                if unstopped.any():
                    st.max_heat_unstopped = max(st.max_heat_unstopped,
                                                float(np.abs(heat[unstopped]).max()))
                minres = np.abs(np.minimum(heat, gap))[resid_mask]
                st.max_min_residual = max(st.max_min_residual, float(minres.max()))
                st.both_exceed += int(np.count_nonzero(
                    (heat > tol) & (gap > tol) & resid_mask))
                st.interior_nodes += int(resid_mask.sum())
                pde = np.abs(np.minimum(heat, gap / ds_j))
                pde[~resid_mask] = 0.0
                k = int(pde.argmax())
                if pde[k] > st.pde_max:
                    st.pde_max = float(pde[k])
                    st.pde_loc = (float(ts[m]), float(xs[k + 1]))
            if keep_mask[m]:
                layers[j, keep_slot[m]] = row
            v = row

        if keep_mask[0]:
            layers[j, keep_slot[0]] = U0
        flagged[j - 1] = fl
        stats_all.append(st)
        prev, cur = cur, prev

    region = np.where(stop_first == SENTINEL, 0, nt + 1 - stop_first).sum(axis=1)
    return ValueSurface(partition=partition, grid=grid, family_desc=family.descriptor(),
                        t_kept=t_kept, kept_index=kept_index, layers=layers, du=du,
                        stop_first=stop_first, flagged=flagged, region_nodes=region,
                        layer_stats=stats_all, tol=tol,
                        full_rows=kept_index.size == nt + 1, resid_mask=resid_mask)


def complementarity_check(surface: ValueSurface, tol: Optional[float] = None) -> ComplementarityReport:
    """Discrete complementarity diagnostics.

    With every time row present the residuals are recomputed from the stored
    values (so injected corruption is caught); otherwise the statistics
    gathered during the solve are used.  Layer 0 carries prescribed data and
    is excluded.
    """
    tol = surface.tol if tol is None else tol
    if surface.full_rows:
        per_layer = _recompute_stats(surface, tol)
    else:
        per_layer = surface.layer_stats
    max_heat = max((st.max_heat_unstopped for st in per_layer), default=0.0)
    max_viol = max((max(0.0, -st.min_gap) for st in per_layer), default=0.0)
    max_minres = max((st.max_min_residual for st in per_layer), default=0.0)
    total = sum(st.interior_nodes for st in per_layer)
    both = sum(st.both_exceed for st in per_layer)
    return ComplementarityReport(max_heat_unstopped=max_heat,
                                 max_obstacle_violation=max_viol,
                                 frac_both_exceed=both / total if total else 0.0,
                                 max_min_residual=max_minres,
                                 tol=tol, per_layer=per_layer)


def _recompute_stats(surface: ValueSurface, tol: float) -> list:
    grid = surface.grid
    dt, dx = grid.dt, grid.dx
    ts = grid.t_nodes()
    xs = grid.x_nodes()
    resid_mask = surface.resid_mask if surface.resid_mask is not None \
        else np.ones(grid.nx - 1, dtype=bool)
    out = []
    for j in range(1, surface.n + 1):
        st = LayerStats(s_prev=float(surface.partition.points[j - 1]),
                        s_val=float(surface.partition.points[j]))
        ds_j = st.s_val - st.s_prev
        uj = surface.layers[j]
        obs = surface.layers[j - 1] + surface.du[j - 1][None, :]
        m_min = max(1, int(math.ceil(INTERIOR_T_FRACTION * grid.nt)))
        heat = (uj[m_min:, 1:-1] - uj[m_min - 1:-1, 1:-1]) / dt \
            - (uj[m_min:, 2:] - 2.0 * uj[m_min:, 1:-1] + uj[m_min:, :-2]) / (2.0 * dx * dx)
        gap = uj[m_min:, 1:-1] - obs[m_min:, 1:-1]
        stopped = gap <= STOP_DECISION_GAP
        unstopped = ~stopped & resid_mask[None, :]
        if unstopped.any():
            st.max_heat_unstopped = float(np.abs(heat[unstopped]).max())
        st.min_gap = float(gap.min())
        minres = np.abs(np.minimum(heat, gap))[:, resid_mask]
        st.max_min_residual = float(minres.max())
        st.both_exceed = int(np.count_nonzero((heat > tol) & (gap > tol)
                                              & resid_mask[None, :]))
        st.interior_nodes = int(heat.shape[0] * resid_mask.sum())
        pde = np.abs(np.minimum(heat, gap / ds_j))
        pde[:, ~resid_mask] = 0.0
        k = np.unravel_index(int(pde.argmax()), pde.shape)
        st.pde_max = float(pde[k])
        st.pde_loc = (float(ts[k[0] + m_min]), float(xs[k[1] + 1]))
        out.append(st)
    return out


# ---------------------------------------------------------------------------
# exhaustive tree oracle

_RULE_COUNT_CAP_DEPTH = 5


def rule_count(depth: int) -> int:
    """Number of adapted stopping rules on a binary tree: S(d) = 1 + S(d-1)^2."""
    c = 1
    for _ in range(depth):
        c = 1 + c * c
    return c


def tree_oracle(family: MarginalFamily, partition: Partition, depth: int,
                dx: float, x0: float = 0.0):
    """Independent oracle: enumerate every adapted stopping rule on the
    non-recombining +-dx walk and take the best expected payoff.

    Returns the per-layer values at (s_j, t = depth * dt, x0), j = 0..n.
    Layer j treats the exhaustively-maximized layer j-1 values as payoff
    data, mirroring the layered problem definition rather than the solver's
    sweep, and every rule's value is materialized before the max.
    """
    if partition.n > 2:
        raise ValidationError("tree oracle supports at most two marginal layers")
    if depth > _RULE_COUNT_CAP_DEPTH:
        raise GridBudgetError(
            f"depth {depth} enumerates {rule_count(depth)} rules per node; cap is "
            f"{_RULE_COUNT_CAP_DEPTH} ({rule_count(_RULE_COUNT_CAP_DEPTH)} rules)")
    svals = partition.points
    n = partition.n

    def pot(s, x):
        return float(family.potential(float(s), np.array([x]))[0])

    du = {j: (lambda x, j=j: pot(svals[j], x) - pot(svals[j - 1], x)) for j in range(1, n + 1)}

    value_memo: dict = {}

    def value(j: int, m: int, x: float) -> float:
        key = (j, m, round((x - x0) / dx))
        if key in value_memo:
            return value_memo[key]
        if j == 0:
            out = pot(svals[0], x)
        else:
            out = float(np.max(rule_values(j, m, x)))
        value_memo[key] = out
        return out

    def rule_values(j: int, m: int, x: float) -> np.ndarray:
        stop = value(j - 1, m, x) + (du[j](x) if m > 0 else 0.0)
        if m == 0:
            return np.array([stop])
        left = rule_values(j, m - 1, x - dx)
        right = rule_values(j, m - 1, x + dx)
        cont = 0.5 * (left[:, None] + right[None, :]).ravel()
        return np.concatenate([[stop], cont])

    return [value(j, depth, x0) for j in range(n + 1)]


# ---------------------------------------------------------------------------
# Monte Carlo lower bounds

def rule_stop_now(k, elapsed, b):
    return np.ones_like(b, dtype=bool)


def rule_stop_at_horizon(k, elapsed, b):
    return np.zeros_like(b, dtype=bool)


def make_barrier_rule(barrier_family, j: int, budget: float):
    """Stop the k-th time once the remaining budget enters barrier j-k+1."""

    def rule(k, elapsed, b):
        r = barrier_family.lookup(j - k + 1, b)
        return (budget - elapsed) >= r

    return rule


def lower_bound_mc(surface: ValueSurface, family: MarginalFamily,
                   rule: Callable, samples: int, seed: int, *,
                   j: Optional[int] = None, t: Optional[float] = None,
                   x: float = 0.0):
    """Estimate the multiple-stopping payoff of an admissible rule.

    Any adapted rule is suboptimal, so the estimate must stay below the
    solved surface value up to Monte Carlo noise and monitoring bias.
    Returns (estimate, stderr, surface_value).
    """
    j = surface.n if j is None else j
    t = float(surface.grid.T) if t is None else float(t)
    h = surface.grid.dt
    steps = int(round(t / h))
    if abs(steps * h - t) > 1e-9:
        raise ValidationError("budget t must be a multiple of the grid time step")
    svals = surface.partition.points
    xs = surface.x_nodes()
    du_at = [None] + [lambda b, jj=jj: np.interp(b, xs, surface.du[jj - 1])
                      for jj in range(1, j + 1)]

    rng = make_stream(seed, 0)
    b = np.full(samples, float(x))
    k_cur = np.ones(samples, dtype=np.int64)
    stop_x = np.zeros((j + 1, samples))
    stop_bonus = np.zeros((j + 1, samples), dtype=bool)
    for m in range(steps):
        elapsed = m * h
        while True:
            active = k_cur <= j
            if not active.any():
                break
            decide = np.zeros(samples, dtype=bool)
            for kv in np.unique(k_cur[active]):
                mask = active & (k_cur == kv)
                decide[mask] = rule(int(kv), elapsed, b[mask])
            if not decide.any():
                break
            idx = np.nonzero(decide)[0]
            stop_x[k_cur[decide], idx] = b[decide]
            stop_bonus[k_cur[decide], idx] = True
            k_cur[decide] += 1
        alive = k_cur <= j
        if not alive.any():
            break
        b[alive] += math.sqrt(h) * rng.standard_normal(int(alive.sum()))
    # budget exhausted: remaining stops are forced at t, bonus indicator off
    while True:
        active = k_cur <= j
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        stop_x[k_cur[active], idx] = b[active]
        k_cur[active] += 1

    # payoff: terminal potential at the last stop plus collected increments
    payoff = family.potential(float(svals[0]), stop_x[j])
    for k in range(1, j + 1):
        inc = du_at[j - k + 1](stop_x[k])
        payoff = payoff + inc * stop_bonus[k]
    est = float(payoff.mean())
    stderr = float(payoff.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    ref = surface.value_at(j, t, x)
    return est, stderr, ref
