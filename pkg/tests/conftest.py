import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from graphctl.formation import formation_dynamics, FormationConfig
from graphctl.graph import GraphModel, QuadraticCost, rollout
from graphctl.linearization import bounds_from_intervals, estimate_bounds, input_matrix
from graphctl.models import LinearGraphDynamics, consensus
from graphctl.polytope import build_polytope
from graphctl.projection import build_gain_tables
from graphctl.synthesis import LmiProblem, synthesize_vertex_gains

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def box_bounds(graph, A, frac):
    lo = np.minimum((1 - frac) * A, (1 + frac) * A)
    hi = np.maximum((1 - frac) * A, (1 + frac) * A)
    return bounds_from_intervals(graph, lo, hi)


def _certify(model, B, nu, D_scale=1e-5, **kw):
    nx = model.base.shape[0]
    problem = LmiProblem.from_polytope(model, B, C=np.eye(nx), D=D_scale * np.eye(nx), nu=nu)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return synthesize_vertex_gains(problem, **kw)


@pytest.fixture(scope="session")
def scalar_case():
    """Single agent, a in [0.5, 1.5], b = 1."""
    g = GraphModel.cycle(1)
    dyn = LinearGraphDynamics(g, [[1.2]], [[1.0]], [np.array([1.0])], QuadraticCost.identity(g))
    bounds = bounds_from_intervals(g, np.array([[0.5]]), np.array([[1.5]]))
    model = build_polytope(bounds)
    cert = _certify(model, input_matrix(dyn), nu=1.0)
    return SimpleNamespace(dyn=dyn, bounds=bounds, model=model, cert=cert,
                           tables=build_gain_tables(model, cert.gains))


@pytest.fixture(scope="session")
def consensus_case():
    """3-agent scalar cycle with +-20% boxes around the consensus matrix."""
    dyn = consensus(3)
    bounds = box_bounds(dyn.graph, dyn.A, 0.2)
    model = build_polytope(bounds)
    cert = _certify(model, input_matrix(dyn), nu=0.05)
    return SimpleNamespace(dyn=dyn, bounds=bounds, model=model, cert=cert,
                           tables=build_gain_tables(model, cert.gains))


@pytest.fixture(scope="session")
def formation_case():
    """Reduced formation instance (N = 3) with sampled bounds and a certificate."""
    cfg = FormationConfig(N=3, T=40)
    dyn = formation_dynamics(cfg)
    rng = np.random.default_rng(1)
    samples = [rollout(dyn, 0.5 * rng.standard_normal((cfg.T, dyn.graph.nu))) for _ in range(10)]
    bounds = estimate_bounds(dyn, samples, 0.05)
    model = build_polytope(bounds)
    cert = _certify(model, input_matrix(dyn), nu=0.05, coupling="floor")
    return SimpleNamespace(dyn=dyn, cfg=cfg, bounds=bounds, model=model, cert=cert, samples=samples,
                           tables=build_gain_tables(model, cert.gains))
