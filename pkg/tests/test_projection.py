import numpy as np
import pytest

from graphctl.graph import Curve, GraphModel, rollout, verify_trajectory
from graphctl.linearization import LinearizationSequence, linearize_along
from graphctl.polytope import build_polytope, coefficients
from graphctl.projection import (ConfigurationError, LocalityError, assembled_sparsity_violation,
                                 build_gain_tables, central_gains, local_gain, local_gain_schedule, project)
from test_polytope import random_bounds, random_inside


def random_gains(model, rng):
    return rng.standard_normal(model.gain_masks.shape) * model.gain_masks


def test_gain_at_bounds():
    g = GraphModel.cycle(3, n=2, m=2)
    rng = np.random.default_rng(0)
    b = random_bounds(g, rng, const_frac=0.0)
    m = build_polytope(b)
    gains = random_gains(m, rng)
    tab = build_gain_tables(m, gains)[0]
    S = m.S_param
    j = 1
    bg = tab.row[j]
    a = np.zeros((2, 2))
    a[bg.row, bg.col] = bg.amin
    k_lo = local_gain(tab, "row", j, a)
    assert np.allclose(k_lo, bg.lower.sum(0) / S, atol=1e-15)
    a[bg.row, bg.col] = bg.amax
    assert np.allclose(local_gain(tab, "row", j, a), bg.upper.sum(0) / S, atol=1e-15)


def test_locality_and_configuration_errors():
    g = GraphModel.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    rng = np.random.default_rng(1)
    m = build_polytope(random_bounds(g, rng, const_frac=0.0))
    tabs = build_gain_tables(m, random_gains(m, rng))
    with pytest.raises(LocalityError):
        local_gain(tabs[0], "row", 3, np.zeros((1, 1)))
    bad = np.zeros_like(m.gain_masks)
    bad[0] = 1.0
    with pytest.raises(ConfigurationError):
        build_gain_tables(m, bad)


def test_tables_hold_only_neighbor_entries():
    g = GraphModel.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)], n=2, m=1)
    rng = np.random.default_rng(2)
    m = build_polytope(random_bounds(g, rng))
    for tab in build_gain_tables(m, random_gains(m, rng)):
        i = tab.agent
        assert set(tab.row) == set(g.neighbors[i]) and set(tab.col) == set(g.neighbors[i])
        assert all(i in e for e in tab.entries())


@pytest.mark.parametrize("seed", range(5))
def test_local_equals_central(seed):
    rng = np.random.default_rng(seed)
    g = GraphModel.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 3)], n=[1, 2, 1, 2, 2], m=[1, 1, 2, 2, 1])
    b = random_bounds(g, rng)
    m = build_polytope(b)
    gains = random_gains(m, rng)
    tabs = build_gain_tables(m, gains)
    A = random_inside(b, rng, n=20)
    seq = LinearizationSequence(g, A, np.zeros((g.nx, g.nu)))
    K_loc = local_gain_schedule(tabs, seq)
    K_cen = central_gains(m, gains, A)
    assert np.max(np.abs(K_loc - K_cen)) <= 1e-12
    assert assembled_sparsity_violation(g, K_loc) == 0.0


def test_idempotent_on_trajectories(formation_case):
    dyn = formation_case.dyn
    rng = np.random.default_rng(0)
    tr = rollout(dyn, 0.3 * rng.standard_normal((formation_case.cfg.T, dyn.graph.nu)))
    K = local_gain_schedule(formation_case.tables, linearize_along(dyn, tr))
    out = project(dyn, K, tr.as_curve())
    assert np.max(np.abs(out.stacked_x() - tr.stacked_x())) <= 1e-14
    assert np.max(np.abs(out.stacked_u() - tr.stacked_u())) <= 1e-14


def test_zero_gains_give_open_loop_rollout(formation_case):
    dyn = formation_case.dyn
    g = dyn.graph
    rng = np.random.default_rng(1)
    T = 30
    c = Curve(tuple(rng.standard_normal((T + 1, 2)) for _ in range(g.N)),
              tuple(rng.standard_normal((T, 2)) * 0.1 for _ in range(g.N)))
    out = project(dyn, np.zeros((T, g.nu, g.nx)), c)
    ref = rollout(dyn, list(c.u), x0=[x[0] for x in c.x])
    assert np.array_equal(out.stacked_x(), ref.stacked_x())
    assert np.array_equal(out.stacked_u(), ref.stacked_u())


def test_perturbed_states_stay_close_and_feasible(formation_case):
    dyn = formation_case.dyn
    g = dyn.graph
    rng = np.random.default_rng(2)
    T = formation_case.cfg.T
    tr = rollout(dyn, 0.3 * rng.standard_normal((T, g.nu)))
    K = local_gain_schedule(formation_case.tables, linearize_along(dyn, tr))
    x = [v + 1e-2 * rng.standard_normal(v.shape) for v in tr.x]
    x = [np.vstack([tr.x[i][:1], x[i][1:]]) for i in range(g.N)]
    out = project(dyn, K, Curve(tuple(x), tr.u))
    assert verify_trajectory(dyn, out).max_defect <= 1e-12
    assert np.max(np.abs(out.stacked_x() - tr.stacked_x())) < 5e-2


def test_project_bad_gain_shape(formation_case):
    dyn = formation_case.dyn
    tr = rollout(dyn, np.zeros((5, 6)))
    with pytest.raises(ValueError):
        project(dyn, np.zeros((4, 6, 6)), tr)
