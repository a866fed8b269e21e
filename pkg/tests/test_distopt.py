import numpy as np
import pytest

from graphctl.distopt import (Agent, Message, Network, ProtocolError, RunConfig, backward_pass,
                              centralized_oracle, expected_message_count, forward_update, make_agents,
                              oracle_direction, run, write_run_outputs)
from graphctl.graph import GraphModel, QuadraticCost, rollout, total_cost, verify_trajectory
from graphctl.linearization import bounds_from_intervals
from graphctl.models import LinearGraphDynamics
from graphctl.polytope import build_polytope
from graphctl.projection import build_gain_tables
from oracles import batch_lq, reduced_directional_derivative, riccati_lq

T_LQ = 20


@pytest.fixture(scope="module")
def lq_run(consensus_case):
    dyn = consensus_case.dyn
    init = rollout(dyn, np.zeros((T_LQ, 3)))
    cfg = RunConfig(beta=0.1, k_max=400, tol=1e-9)
    res = run(dyn, consensus_case.tables, cfg, initial=init)
    ora = centralized_oracle(dyn, consensus_case.model, consensus_case.cert.gains, cfg, init)
    return res, ora


def test_stationary_zero_trajectory(consensus_case):
    dyn = consensus_case.dyn
    zero = rollout(dyn, np.zeros((5, 3)), x0=[np.zeros(1)] * 3)
    agents = make_agents(dyn, consensus_case.tables, zero)
    backward_pass(agents, 0, Network(dyn.graph))
    for a in agents:
        assert np.all(a.p == 0) and np.all(a.v == 0) and np.all(a.z == 0)


def test_single_agent_hand_value():
    # l_u = 1 at u = 1 (r = 1), b = 2, grad m(x_1) = 3 at x_1 = 3 (qf = 1)
    g = GraphModel.cycle(1)
    dyn = LinearGraphDynamics(g, [[1.0]], [[2.0]], [np.array([1.0])], QuadraticCost.identity(g))
    tr = rollout(dyn, np.array([[1.0]]))
    assert tr.x[0][1, 0] == 3.0
    m = build_polytope(bounds_from_intervals(g, np.array([[0.5]]), np.array([[1.5]])))
    tabs = build_gain_tables(m, np.zeros_like(m.gain_masks))
    agents = make_agents(dyn, tabs, tr)
    backward_pass(agents, 0, Network(g))
    assert agents[0].v[0, 0] == -7.0


def test_backward_matches_oracle(formation_case):
    dyn = formation_case.dyn
    rng = np.random.default_rng(4)
    tr = rollout(dyn, 0.3 * rng.standard_normal((formation_case.cfg.T, dyn.graph.nu)))
    agents = make_agents(dyn, formation_case.tables, tr)
    backward_pass(agents, 0, Network(dyn.graph))
    ref = oracle_direction(dyn, formation_case.model, formation_case.cert.gains, tr)
    g = dyn.graph
    for a in agents:
        assert np.max(np.abs(a.z - ref.z[:, g.xslice(a.i)])) <= 1e-12
        assert np.max(np.abs(a.v - ref.v[:, g.uslice(a.i)])) <= 1e-12
        assert np.max(np.abs(a.p - ref.p[:, g.xslice(a.i)])) <= 1e-12 * max(1, np.abs(ref.p).max())


def test_beta_zero_and_zero_direction_keep_iterate(formation_case):
    dyn = formation_case.dyn
    rng = np.random.default_rng(5)
    tr = rollout(dyn, 0.3 * rng.standard_normal((formation_case.cfg.T, dyn.graph.nu)))
    agents = make_agents(dyn, formation_case.tables, tr)
    net = Network(dyn.graph)
    backward_pass(agents, 0, net)
    forward_update(agents, 0, 0.0, net)
    for a in agents:
        assert np.array_equal(a.x_new[a.i], tr.x[a.i]) and np.array_equal(a.u_new, tr.u[a.i])
    for a in agents:
        a.z[:] = 0
        a.v[:] = 0
    forward_update(agents, 0, 0.7, net)
    for a in agents:
        assert np.array_equal(a.x_new[a.i], tr.x[a.i]) and np.array_equal(a.u_new, tr.u[a.i])


def test_lq_converges_to_riccati(consensus_case, lq_run):
    res, _ = lq_run
    dyn = consensus_case.dyn
    assert res.status == "converged" and res.direction_norms[-1] < 1e-8
    X, U = riccati_lq(dyn.A, dyn.B, np.eye(3), np.eye(3), np.eye(3), np.concatenate(dyn.x0), T_LQ)
    assert np.max(np.abs(res.final.stacked_x() - X)) < 1e-6
    assert np.max(np.abs(res.final.stacked_u() - U)) < 1e-6


def test_riccati_oracle_agrees_with_generic_solver(consensus_case):
    dyn = consensus_case.dyn
    x0 = np.concatenate(dyn.x0)
    _, U = riccati_lq(dyn.A, dyn.B, np.eye(3), np.eye(3), np.eye(3), x0, 8)
    assert np.max(np.abs(batch_lq(dyn.A, dyn.B, np.eye(3), np.eye(3), np.eye(3), x0, 8) - U)) < 1e-5


def test_distributed_equals_centralized(lq_run):
    res, ora = lq_run
    assert len(res.iterates) == len(ora.iterates)
    for a, b in zip(res.iterates, ora.iterates):
        assert np.max(np.abs(a.stacked_x() - b.stacked_x())) <= 1e-10
        assert np.max(np.abs(a.stacked_u() - b.stacked_u())) <= 1e-10
    assert np.max(np.abs(np.array(res.costs) - np.array(ora.costs))) <= 1e-10


def test_cost_decreases_and_iterates_feasible(lq_run, consensus_case):
    res, _ = lq_run
    assert np.all(np.diff(res.costs) <= 1e-15)
    for tr in res.iterates:
        assert verify_trajectory(consensus_case.dyn, tr).max_defect <= 1e-12


def test_directional_derivative_negative(formation_case):
    dyn = formation_case.dyn
    rng = np.random.default_rng(6)
    tr = rollout(dyn, 0.3 * rng.standard_normal((formation_case.cfg.T, dyn.graph.nu)))
    st = oracle_direction(dyn, formation_case.model, formation_case.cert.gains, tr)
    d = reduced_directional_derivative(dyn, st.K, tr, st.z, st.v)
    sq = float(np.sum(st.z ** 2) + np.sum(st.v ** 2))
    assert d < 0
    assert d == pytest.approx(-sq, rel=1e-5)


def test_locality_and_message_counts(formation_case):
    dyn = formation_case.dyn
    tr = rollout(dyn, 0.2 * np.ones((formation_case.cfg.T, dyn.graph.nu)))
    res = run(dyn, formation_case.tables, RunConfig(beta=0.01, k_max=3, tol=0.0), initial=tr)
    g = dyn.graph
    n = expected_message_count(g, formation_case.cfg.T)
    assert n == formation_case.cfg.T * 6
    for k in range(3):
        assert res.trace.count(k, "backward") == n and res.trace.count(k, "forward") == n
    assert res.trace.non_edge_accesses(g) == []
    assert len(res.trace.accesses) == len(res.trace.messages)


def test_network_rejects_non_edges_and_bad_payloads():
    g = GraphModel.from_edges(3, [(0, 1), (1, 2)])
    net = Network(g)
    with pytest.raises(ProtocolError):
        net.send(Message(0, "forward", 0, 0, 2, {"z": 0, "x": 0}))
    with pytest.raises(ProtocolError):
        net.send(Message(0, "forward", 0, 0, 1, {"z": 0, "p": 0}))
    with pytest.raises(ProtocolError):
        net.receive(0, 1, "forward", 0, 0)


def test_agent_refuses_non_neighbor_data(consensus_case):
    g = GraphModel.from_edges(3, [(0, 1), (1, 2)])
    dyn = LinearGraphDynamics(g, [[0.5, 0.1, 0], [0.1, 0.5, 0.1], [0, 0.1, 0.5]], np.eye(3),
                              [np.ones(1)] * 3)
    tr = rollout(dyn, np.zeros((3, 3)))
    m = build_polytope(bounds_from_intervals(g, 0.5 * dyn.A, 1.5 * dyn.A))
    tabs = build_gain_tables(m, np.zeros_like(m.gain_masks))
    with pytest.raises(ProtocolError):
        Agent(0, dyn, tabs[0], {j: tr.x[j] for j in range(3)}, tr.u[0])


def test_parallel_workers_identical(formation_case):
    dyn = formation_case.dyn
    tr = rollout(dyn, 0.2 * np.ones((formation_case.cfg.T, dyn.graph.nu)))
    a = run(dyn, formation_case.tables, RunConfig(beta=0.01, k_max=4, tol=0.0), initial=tr)
    b = run(dyn, formation_case.tables, RunConfig(beta=0.01, k_max=4, tol=0.0, workers=3), initial=tr)
    for x, y in zip(a.iterates, b.iterates):
        assert np.array_equal(x.stacked_x(), y.stacked_x()) and np.array_equal(x.stacked_u(), y.stacked_u())
    assert [(m.k, m.phase, m.t, m.sender, m.receiver) for m in a.trace.messages] == \
        [(m.k, m.phase, m.t, m.sender, m.receiver) for m in b.trace.messages]


def test_divergence_keeps_feasible_history(formation_case):
    dyn = formation_case.dyn
    tr = rollout(dyn, 0.3 * np.ones((formation_case.cfg.T, dyn.graph.nu)))
    res = run(dyn, formation_case.tables, RunConfig(beta=50.0, k_max=50, tol=0.0, record_trace=False), initial=tr)
    assert res.status == "diverged"
    for it in res.iterates:
        assert verify_trajectory(dyn, it).max_defect <= 1e-12


def test_backtracking_monotone(formation_case):
    dyn = formation_case.dyn
    tr = rollout(dyn, 0.3 * np.ones((formation_case.cfg.T, dyn.graph.nu)))
    res = run(dyn, formation_case.tables, RunConfig(beta=1.0, k_max=10, tol=0.0, step_mode="backtracking"),
              initial=tr)
    assert np.all(np.diff(res.costs) <= 0)
    assert min(res.steps) < 1.0


def test_run_outputs(tmp_path, lq_run, consensus_case):
    res, _ = lq_run
    paths = write_run_outputs(tmp_path, consensus_case.dyn, res)
    for p in paths.values():
        assert p.exists()
    head = paths["trace"].read_text().splitlines()[0]
    assert head == "iter,phase,t,sender,receiver,payload_kind"
    assert paths["cost"].read_text().splitlines()[0].startswith("iter,cost,direction_norm")
