import numpy as np
import pytest

from graphctl.formation import FormationConfig, FormationDynamics, formation_dynamics, polygon, settle
from graphctl.graph import check_partials, rollout


def test_equilibrium_in_formation():
    cfg = FormationConfig(N=6)
    pts = polygon(6, cfg.d)
    dyn = FormationDynamics(cfg, x0=pts)
    nxt = dyn.step(list(pts), [np.zeros(2)] * 6)
    assert np.max(np.abs(np.array(nxt) - pts)) < 1e-12


def test_hexagon_side_length():
    pts = polygon(6, 4.0)
    sides = np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1)
    assert np.allclose(sides, 4.0)


def test_input_block():
    dyn = formation_dynamics(N=6)
    for i in range(6):
        assert np.array_equal(dyn.dfdu(i), 0.1 * np.eye(2))


def test_partials_fifty_points():
    assert check_partials(formation_dynamics(N=6), 50, rng=1) < 1e-5


def test_rotation_commutes():
    dyn = formation_dynamics(N=6)
    rng = np.random.default_rng(0)
    th = 0.7
    Rm = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    x = [rng.standard_normal(2) * 3 for _ in range(6)]
    u = [rng.standard_normal(2) for _ in range(6)]
    a = np.array(dyn.step([Rm @ v for v in x], [Rm @ v for v in u]))
    b = np.array([Rm @ v for v in dyn.step(x, u)])
    assert np.max(np.abs(a - b)) < 1e-10


def test_open_loop_settles_to_hexagon():
    dyn = formation_dynamics(N=6)
    xd = dyn.x_des
    sides = np.linalg.norm(xd - np.roll(xd, -1, axis=0), axis=1)
    assert np.allclose(sides, 4.0, atol=1e-8)
    tr = rollout(dyn, np.zeros((400, 12)))
    assert np.max(np.abs(np.array([x[-1] for x in tr.x]) - xd)) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        FormationConfig(d=-1)
    with pytest.raises(ValueError):
        FormationConfig(N=2)
