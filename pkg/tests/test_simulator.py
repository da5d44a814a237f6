import math

import numpy as np
import pytest
from scipy import integrate

import rootsep as rs
from rootsep.barriers import BarrierFamily
from rootsep.errors import HorizonError, ValidationError


@pytest.fixture(scope="module")
def gauss_run(gauss_family):
    part = rs.make_partition(4, "uniform")
    grid = rs.make_grid(gauss_family, 1.25, 0.05)
    surf = rs.solve_layers(gauss_family, part, grid,
                           keep_times=[0.0, 0.25, 0.5, 1.0, 1.25])
    barrier = rs.extract(surf)
    ens = rs.simulate_root(gauss_family, barrier, 40_000, grid.dt, seed=7,
                           snapshot_times=[0.0, 0.25, 0.5, 1.0])
    return surf, barrier, ens


def analytic_vertical_barrier(level_time: float, h: float, horizon: float,
                              family) -> BarrierFamily:
    xs = (np.arange(-200, 201)) * 0.05
    return BarrierFamily(s_values=np.array([1.0]), x_nodes=xs,
                         r=np.full((1, xs.size), level_time),
                         eps_b=None, flagged=np.zeros(1, dtype=int),
                         region_nodes=np.ones(1, dtype=int),
                         grid_desc={"dt": h, "T": horizon, "dx": 0.05, "L": 10.0},
                         family_desc=family.descriptor())


# ---------------------------------------------------------------------------
# stopping times

def test_vertical_barrier_hits(gauss_run):
    surf, _, ens = gauss_run
    dt = surf.grid.dt
    for j in range(1, 5):
        s_j = surf.partition.points[j]
        assert np.abs(ens.sigma[j] - s_j).max() <= 5 * dt + ens.h_sim
    assert np.all(np.diff(ens.sigma[1:], axis=0) >= 0.0)
    assert ens.censored_fraction == 0.0


def test_two_atom_stop_values(two_atom_family, two_atom_surface):
    barrier = rs.extract(two_atom_surface)
    ens = rs.simulate_root(two_atom_family, barrier, 30_000, 1e-3, seed=3)
    vals = ens.b_sigma[1][~ens.censored]
    assert np.abs(vals).min() >= 1.0            # stop only at or beyond the atoms
    assert np.abs(vals).max() <= 1.0 + 0.2      # overshoot stays near the level
    mean_sigma = ens.sigma[1][~ens.censored].mean()
    assert mean_sigma == pytest.approx(1.0, abs=0.05)


def test_determinism_and_threads(gauss_family, gauss_run):
    surf, barrier, ens = gauss_run
    again = rs.simulate_root(gauss_family, barrier, 40_000, surf.grid.dt, seed=7,
                             snapshot_times=[0.0, 0.25, 0.5, 1.0])
    threaded = rs.simulate_root(gauss_family, barrier, 40_000, surf.grid.dt, seed=7,
                                snapshot_times=[0.0, 0.25, 0.5, 1.0], threads=8)
    for other in (again, threaded):
        assert np.array_equal(ens.sigma, other.sigma)
        assert np.array_equal(ens.b_sigma[1:], other.b_sigma[1:])
        assert np.array_equal(ens.x0, other.x0)
        for k in ens.snapshots:
            assert np.array_equal(ens.snapshots[k], other.snapshots[k])
    different = rs.simulate_root(gauss_family, barrier, 40_000, surf.grid.dt, seed=8)
    assert not np.array_equal(ens.sigma, different.sigma)


def test_h_sim_gate(gauss_family, gauss_run):
    _, barrier, _ = gauss_run
    with pytest.raises(ValidationError):
        rs.simulate_root(gauss_family, barrier, 100, 1.0, seed=1)


def test_censoring_error(two_atom_family, two_atom_surface):
    barrier = rs.extract(two_atom_surface)
    with pytest.raises(HorizonError):
        rs.simulate_root(two_atom_family, barrier, 5000, 1e-3, seed=1, horizon=0.5)


# ---------------------------------------------------------------------------
# empirical potentials

def test_empirical_potential_time_zero(gauss_run, gauss_family):
    _, _, ens = gauss_run
    probes = np.array([-1.0, 0.0, 2.0])
    emp, se = rs.empirical_potential(ens, 1, 0.0, probes)
    exact = gauss_family.potential(0.0, probes)
    assert np.all(np.abs(emp - exact) <= 4.0 * se)


def test_empirical_potential_matches_solver(gauss_run):
    surf, _, ens = gauss_run
    bias = 2.0 * math.sqrt(ens.h_sim)
    for j in (1, 4):
        for t in (0.25, 0.5, 1.0):
            probes = np.array([-1.0, 0.0, 1.0])
            emp, se = rs.empirical_potential(ens, j, t, probes)
            ref = np.array([surf.value_at(j, t, x) for x in probes])
            assert np.all(np.abs(emp - ref) <= 3.0 * se + bias)


def test_empirical_potential_far_probe(gauss_run):
    _, _, ens = gauss_run
    x_far = 12.0
    emp, se = rs.empirical_potential(ens, 4, 1.0, np.array([x_far]))
    mean_b = ens.values_at(4, 1.0).mean()
    assert emp[0] == pytest.approx(-(x_far - mean_b), abs=1e-9)


def test_empirical_potential_needs_snapshot(gauss_run):
    _, _, ens = gauss_run
    with pytest.raises(ValidationError):
        rs.empirical_potential(ens, 1, 0.1234, np.array([0.0]))


# ---------------------------------------------------------------------------
# marginal fit

def test_marginal_fit_gaussian(gauss_run, gauss_family):
    _, _, ens = gauss_run
    fit = rs.marginal_fit(ens, gauss_family)
    assert fit.passed
    for m in fit.marginals:
        assert m["ks"] <= 0.015
        assert m["potential_distance"] <= 0.02
    assert fit.ui_proxy["passed"]


def test_marginal_fit_three_point(three_point_family):
    part = rs.make_partition(4, "uniform")
    grid = rs.make_grid(three_point_family, 3.0, 0.025)
    surf = rs.solve_layers(three_point_family, part, grid, keep_times=[0.0, grid.T])
    barrier = rs.extract(surf)
    ens = rs.simulate_root(three_point_family, barrier, 50_000, grid.dt, seed=11, threads=2)
    fit = rs.marginal_fit(ens, three_point_family)
    for m in fit.marginals:
        p = three_point_family.p(m["s"])
        assert abs(m["atom_masses"][1] - (1 - 2 * p)) <= 0.01
        assert m["atom_mass_error"] <= 0.01
        assert m["passed"]


# ---------------------------------------------------------------------------
# optimality functional

def test_monotone_poly_validation():
    with pytest.raises(ValidationError):
        rs.MonotonePiecewisePoly.poly(1.0, -1.0)      # decreasing
    with pytest.raises(ValidationError):
        rs.MonotonePiecewisePoly.poly(-0.5)           # negative
    f = rs.MonotonePiecewisePoly([0.0, 1.0], [[0.0, 1.0], [1.0]])
    t = np.array([0.5, 2.0])
    assert np.allclose(f(t), [0.5, 1.0])


def test_antiderivative_against_quadrature():
    f = rs.MonotonePiecewisePoly([0.0, 1.0], [[0.0, 0.0, 1.0], [1.0, 2.0]])
    for t in (0.3, 1.0, 2.7):
        oracle = 0.0
        for a, b in ((0.0, min(t, 1.0)), (min(t, 1.0), t)):
            if b > a:
                seg, _ = integrate.quad(lambda u: f(np.array([u]))[0], a, b, epsabs=1e-12)
                oracle += seg
        assert f.antiderivative(np.array([t]))[0] == pytest.approx(oracle, abs=1e-10)


def test_root_functional_exact(gauss_family):
    fam = rs.ScaledFamily(0.0)
    h = 0.0025
    barrier = analytic_vertical_barrier(1.0, h, 1.5, fam)
    ens = rs.simulate_root(fam, barrier, 5000, h, seed=3)
    assert np.all(ens.sigma[1] == 1.0)
    est, se = rs.optimality_functional(ens, rs.MonotonePiecewisePoly.poly(0.0, 1.0))
    assert est == 0.5 and se == 0.0


def test_functional_rejects_non_poly(gauss_run):
    _, _, ens = gauss_run
    with pytest.raises(ValidationError):
        rs.optimality_functional(ens, lambda t: t)


# ---------------------------------------------------------------------------
# alternative embedding (smoke scale; pinned-scale checks live in acceptance)

def test_alternative_embedding_smoke():
    ens = rs.alternative_embedding(4000, seed=21, h_sim=1e-3, horizon=120.0)
    est, se = rs.optimality_functional(ens, rs.MonotonePiecewisePoly.poly(1.0))
    assert est == pytest.approx(1.0, abs=5 * se + 0.1)
    est_t, se_t = rs.optimality_functional(ens, rs.MonotonePiecewisePoly.poly(0.0, 1.0))
    assert est_t == pytest.approx(2.5, abs=5 * se_t + 0.3)
    again = rs.alternative_embedding(4000, seed=21, h_sim=1e-3, horizon=120.0, threads=4)
    assert np.array_equal(ens.sigma, again.sigma)


# ---------------------------------------------------------------------------
# continuity of the stopping clock

def test_continuity_gaussian(gauss_family):
    part = rs.make_partition(32, "uniform")
    grid = rs.make_grid(gauss_family, 1.25, 0.1)
    surf = rs.solve_layers(gauss_family, part, grid, keep_times=[0.0, 1.25])
    barrier = rs.extract(surf)
    ens = rs.simulate_root(gauss_family, barrier, 20_000, grid.dt, seed=13)
    rep = rs.continuity_check(gauss_family, ens)
    assert rep["assumption_satisfied"]
    assert rep["decreasing"] and rep["toward_zero"]
    for row in rep["rows"]:
        # vertical barriers: the increment equals delta exactly up to monitoring
        assert row["mean"] == pytest.approx(row["delta"], abs=5 * grid.dt + 0.01)


def test_continuity_constant(constant_family):
    part = rs.make_partition(32, "uniform")
    grid = rs.make_grid(constant_family, 1.0, 0.1)
    surf = rs.solve_layers(constant_family, part, grid, keep_times=[0.0, 1.0])
    barrier = rs.extract(surf)
    ens = rs.simulate_root(constant_family, barrier, 2000, grid.dt, seed=2)
    rep = rs.continuity_check(constant_family, ens)
    for row in rep["rows"]:
        assert row["mean"] == 0.0


def test_continuity_three_point(three_point_family):
    part = rs.make_partition(32, "uniform")
    grid = rs.make_grid(three_point_family, 3.0, 0.05)
    surf = rs.solve_layers(three_point_family, part, grid, keep_times=[0.0, 3.0])
    barrier = rs.extract(surf)
    ens = rs.simulate_root(three_point_family, barrier, 20_000, 1e-3, seed=17)
    rep = rs.continuity_check(three_point_family, ens)
    assert rep["decreasing"]
