"""Fully distributed descent over a synchronous message-passing harness.

Each iteration has a backward phase (rounds t = T-1..0) computing the
adjoint ``p`` and the direction ``(z, v)``, and a forward phase (rounds
t = 0..T-1) applying the curve update and the projection.  Agents only hold
their own blocks and copies of neighbor states; everything else arrives in
messages routed by :class:`Network`, which rejects non-edges and logs every
read in a :class:`RoundTrace`.

Block convention for the backward recursion (stacked form):

    v_t = -(l_u + B' p_{t+1})
    z_t = K_t' v_t
    p_t = (A_t - B K_t)' p_{t+1} - K_t' l_u + l_x,     p_T = grad m

so that ``(z, v)`` is minus the gradient of the cost of the projected
trajectory with respect to the curve ``(alpha, mu)``.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import (Curve, DivergenceError, DynamicsOverGraph, Trajectory, rollout, total_cost,
                    verify_trajectory)
from .linearization import input_matrix, linearize_point
from .polytope import OutOfBox, PolytopeModel
from .projection import LocalGainTable, central_gains, local_gain

log = logging.getLogger(__name__)

BACKWARD_KINDS = ("a", "b", "v", "lu", "p")
FORWARD_KINDS = ("z", "x")


class ProtocolError(AssertionError):
    pass


@dataclass(frozen=True)
class Message:
    k: int
    phase: str
    t: int
    sender: int
    receiver: int
    payload: dict


@dataclass(frozen=True)
class TraceEntry:
    """Metadata of a delivered message (payload values are not retained)."""

    k: int
    phase: str
    t: int
    sender: int
    receiver: int
    kinds: str


@dataclass
class RoundTrace:
    messages: list = field(default_factory=list)     # TraceEntry per sent message
    accesses: list = field(default_factory=list)   # (k, phase, t, reader, owner)

    def count(self, k: int | None = None, phase: str | None = None) -> int:
        return sum(1 for m in self.messages
                   if (k is None or m.k == k) and (phase is None or m.phase == phase))

    def non_edge_accesses(self, graph) -> list:
        return [a for a in self.accesses if not graph.is_edge(a[3], a[4])]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "phase", "t", "sender", "receiver", "payload_kind"])
            for m in self.messages:
                w.writerow([m.k, m.phase, m.t, m.sender, m.receiver, m.kinds])


class Network:
    """Routes messages along edges only and keeps the trace."""

    def __init__(self, graph, trace: RoundTrace | None = None, record: bool = True):
        self.graph = graph
        self.trace = trace if trace is not None else RoundTrace()
        self.record = record
        self._inbox: dict = {}

    def send(self, msg: Message) -> None:
        if msg.sender == msg.receiver or not self.graph.is_edge(msg.receiver, msg.sender):
            raise ProtocolError(f"no edge {msg.sender} -> {msg.receiver}")
        kinds = BACKWARD_KINDS if msg.phase == "backward" else FORWARD_KINDS
        if tuple(sorted(msg.payload)) != tuple(sorted(kinds)):
            raise ProtocolError(f"payload {sorted(msg.payload)} does not match phase {msg.phase}")
        self._inbox[(msg.receiver, msg.phase, msg.t, msg.sender)] = msg
        if self.record:
            self.trace.messages.append(TraceEntry(msg.k, msg.phase, msg.t, msg.sender, msg.receiver,
                                                  "+".join(sorted(msg.payload))))

    def receive(self, k: int, i: int, phase: str, t: int, sender: int) -> dict:
        try:
            msg = self._inbox.pop((i, phase, t, sender))
        except KeyError:
            raise ProtocolError(f"agent {i} expected a {phase} message from {sender} at t={t}") from None
        if self.record:
            self.trace.accesses.append((k, phase, t, i, sender))
        return msg.payload


class Agent:
    """Local state machine of agent ``i``.

    Holds ``x[j]`` for j in N_i, its own input ``u``, the adjoint ``p`` and
    the direction pieces ``z``, ``v``.
    """

    def __init__(self, i: int, dyn: DynamicsOverGraph, table: LocalGainTable, x_nbrs: dict, u: np.ndarray):
        self.i = i
        self.dyn = dyn
        self.nbrs = dyn.graph.neighbors[i]
        if set(x_nbrs) != set(self.nbrs):
            raise ProtocolError(f"agent {i} initialized with non-neighbor data")
        self.table = table
        self.x = {j: np.array(x_nbrs[j], float) for j in self.nbrs}
        self.u = np.array(u, float)
        self.T = self.u.shape[0]
        self.b = dyn.dfdu(i)
        self.warnings: list = []
        self._reset()

    def _reset(self):
        n, m, T = self.dyn.graph.state_dims[self.i], self.dyn.graph.input_dims[self.i], self.T
        self.p = np.zeros((T + 1, n))
        self.z = np.zeros((T, n))
        self.v = np.zeros((T, m))
        self.lu = np.zeros((T, m))
        self.lx = np.zeros((T, n))
        self.a_row = [None] * T     # per t: {j: a_t(i,j)}

    # backward phase
    def start_backward(self):
        i = self.i
        self.p[self.T] = self.dyn.terminal_grad(i, self.x[i][self.T])

    def backward_emit(self, k: int, t: int) -> list[Message]:
        i = self.i
        xn = [self.x[j][t] for j in self.nbrs]
        blocks = self.dyn.dfdx(i, xn, self.u[t])
        self.a_row[t] = dict(zip(self.nbrs, blocks))
        self.lx[t], self.lu[t] = self.dyn.stage_grad(i, self.x[i][t], self.u[t])
        self.v[t] = -(self.lu[t] + self.b.T @ self.p[t + 1])
        return [Message(k, "backward", t, i, j,
                        {"a": self.a_row[t][j], "b": self.b, "v": self.v[t], "lu": self.lu[t], "p": self.p[t + 1]})
                for j in self.nbrs if j != i]

    def backward_absorb(self, k: int, t: int, net: Network) -> None:
        i = self.i
        z = np.zeros_like(self.z[t])
        p = self.lx[t].copy()
        for j in self.nbrs:
            if j == i:
                d = {"a": self.a_row[t][i], "b": self.b, "v": self.v[t], "lu": self.lu[t], "p": self.p[t + 1]}
            else:
                d = net.receive(k, i, "backward", t, j)
            kji = local_gain(self.table, "col", j, d["a"], self.warnings)
            z = z + kji.T @ d["v"]
            p = p + (d["a"] - d["b"] @ kji).T @ d["p"] - kji.T @ d["lu"]
        self.z[t] = z
        self.p[t] = p

    # forward phase
    def start_forward(self, beta: float):
        self.beta = beta
        self.x_new = {j: np.empty_like(self.x[j]) for j in self.nbrs}
        self.u_new = np.empty_like(self.u)
        self.x_new[self.i][0] = self.x[self.i][0]

    def forward_emit(self, k: int, t: int) -> list[Message]:
        i = self.i
        return [Message(k, "forward", t, i, j, {"z": self.z[t], "x": self.x_new[i][t]})
                for j in self.nbrs if j != i]

    def forward_absorb(self, k: int, t: int, net: Network) -> None:
        i = self.i
        beta = self.beta
        z_nb = {}
        for j in self.nbrs:
            if j == i:
                z_nb[j] = self.z[t]
            else:
                d = net.receive(k, i, "forward", t, j)
                z_nb[j] = d["z"]
                self.x_new[j][t] = d["x"]
        mu = self.u[t] + beta * self.v[t]
        ui = mu.copy()
        for j in self.nbrs:
            alpha = self.x[j][t] + beta * z_nb[j]
            kij = local_gain(self.table, "row", j, self.a_row[t][j], self.warnings)
            ui = ui + kij @ (alpha - self.x_new[j][t])
        self.u_new[t] = ui
        self.x_new[i][t + 1] = self.dyn.f(i, [self.x_new[j][t] for j in self.nbrs], ui)
        if not np.all(np.isfinite(self.x_new[i][t + 1])):
            raise DivergenceError(i, t + 1)

    def commit(self):
        # neighbor copies at t = T are never sent; they are not used either
        for j in self.nbrs:
            if j != self.i:
                self.x_new[j][self.T] = self.x[j][self.T]
        self.x = self.x_new
        self.u = self.u_new


@dataclass
class RunConfig:
    beta: float = 0.1
    k_max: int = 500
    tol: float = 1e-6
    step_mode: str = "constant"      # "backtracking" halves beta on the harness (non-distributed)
    workers: int = 1
    record_trace: bool = True


@dataclass
class RunResult:
    iterates: list
    costs: list
    direction_norms: list
    trace: RoundTrace
    warnings: list
    status: str
    error: str | None = None
    steps: list = field(default_factory=list)

    @property
    def final(self) -> Trajectory:
        return self.iterates[-1]


def _each(pool, fn, items):
    if pool is None:
        return [fn(a) for a in items]
    return list(pool.map(fn, items))


def backward_pass(agents: Sequence[Agent], k: int, net: Network, pool=None) -> None:
    T = agents[0].T
    for a in agents:
        a.start_backward()
    for t in range(T - 1, -1, -1):
        outboxes = _each(pool, lambda a: a.backward_emit(k, t), agents)
        for box in outboxes:        # agent order keeps the trace deterministic
            for m in box:
                net.send(m)
        _each(pool, lambda a: a.backward_absorb(k, t, net), agents)


def forward_update(agents: Sequence[Agent], k: int, beta: float, net: Network, pool=None) -> None:
    T = agents[0].T
    for a in agents:
        a.start_forward(beta)
    for t in range(T):
        outboxes = _each(pool, lambda a: a.forward_emit(k, t), agents)
        for box in outboxes:
            for m in box:
                net.send(m)
        _each(pool, lambda a: a.forward_absorb(k, t, net), agents)


def _gather(agents: Sequence[Agent], attr_new: bool = False) -> Trajectory:
    x = tuple((a.x_new if attr_new else a.x)[a.i] for a in agents)
    u = tuple(a.u_new if attr_new else a.u for a in agents)
    return Trajectory(x, u)


def direction_norm(agents: Sequence[Agent]) -> float:
    return float(max(max(np.max(np.abs(a.z), initial=0.0), np.max(np.abs(a.v), initial=0.0)) for a in agents))


def make_agents(dyn: DynamicsOverGraph, tables: Sequence[LocalGainTable], traj: Curve) -> list[Agent]:
    g = dyn.graph
    return [Agent(i, dyn, tables[i], {j: traj.x[j] for j in g.neighbors[i]}, traj.u[i]) for i in range(g.N)]


def run(dyn: DynamicsOverGraph, tables: Sequence[LocalGainTable], cfg: RunConfig,
        initial: Trajectory | None = None, inputs=None) -> RunResult:
    """Distributed descent from a trajectory (default: open-loop rollout of ``inputs`` or zeros).

    Stops when the direction's max-norm drops below ``cfg.tol`` or after
    ``cfg.k_max`` updates.  A divergence ends the run and keeps the history,
    so the last iterate is always a trajectory.
    """
    g = dyn.graph
    if initial is None:
        if inputs is None:
            raise ValueError("need an initial trajectory or an input sequence")
        initial = rollout(dyn, inputs)
    net = Network(g, record=cfg.record_trace)
    agents = make_agents(dyn, tables, initial)
    iterates, costs, norms, warn, steps = [initial], [total_cost(dyn, initial)], [], [], []
    status, err = "max_iter", None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for k in range(cfg.k_max + 1):
            backward_pass(agents, k, net, pool)
            nrm = direction_norm(agents)
            norms.append(nrm)
            for a in agents:
                warn.extend((k, "backward", a.i, w) for w in a.warnings)
                a.warnings.clear()
            if nrm < cfg.tol:
                status = "converged"
                break
            if k == cfg.k_max:
                break
            beta = cfg.beta
            try:
                forward_update(agents, k, beta, net, pool)
                new = _gather(agents, attr_new=True)
                if cfg.step_mode == "backtracking":
                    c_new = total_cost(dyn, new)
                    while c_new > costs[-1] and beta > 1e-12:
                        beta *= 0.5
                        forward_update(agents, k, beta, net, pool)
                        new = _gather(agents, attr_new=True)
                        c_new = total_cost(dyn, new)
            except DivergenceError as exc:
                status, err = "diverged", str(exc)
                break
            for a in agents:
                warn.extend((k, "forward", a.i, w) for w in a.warnings)
                a.warnings.clear()
                a.commit()
                a._reset()
            iterates.append(new)
            costs.append(total_cost(dyn, new))
            steps.append(beta)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(iterates, costs, norms, net.trace, warn, status, err, steps)


def expected_message_count(graph, T: int) -> int:
    """Messages per phase per iteration: one per directed edge and round."""
    return T * sum(len(n) - 1 for n in graph.neighbors)


@dataclass
class OracleStep:
    K: np.ndarray   # (T, nu, nx)
    A: np.ndarray
    p: np.ndarray   # (T+1, nx)
    z: np.ndarray   # (T, nx)
    v: np.ndarray   # (T, nu)


def oracle_direction(dyn: DynamicsOverGraph, model: PolytopeModel, gains: np.ndarray, traj: Curve,
                     record: list | None = None) -> OracleStep:
    """Stacked-matrix version of the backward phase."""
    g = dyn.graph
    T = traj.T
    B = input_matrix(dyn)
    A = np.array([linearize_point(dyn, traj.x, traj.u, t) for t in range(T)]).reshape(T, g.nx, g.nx)
    K = central_gains(model, gains, A, record) if T else np.zeros((0, g.nu, g.nx))
    lx = np.zeros((T, g.nx))
    lu = np.zeros((T, g.nu))
    for t in range(T):
        for i in range(g.N):
            lx[t, g.xslice(i)], lu[t, g.uslice(i)] = dyn.stage_grad(i, traj.x[i][t], traj.u[i][t])
    p = np.zeros((T + 1, g.nx))
    for i in range(g.N):
        p[T, g.xslice(i)] = dyn.terminal_grad(i, traj.x[i][T])
    z = np.zeros((T, g.nx))
    v = np.zeros((T, g.nu))
    for t in range(T - 1, -1, -1):
        v[t] = -(lu[t] + B.T @ p[t + 1])
        z[t] = K[t].T @ v[t]
        p[t] = (A[t] - B @ K[t]).T @ p[t + 1] - K[t].T @ lu[t] + lx[t]
    return OracleStep(K, A, p, z, v)


def oracle_update(dyn: DynamicsOverGraph, step: OracleStep, traj: Curve, beta: float) -> Trajectory:
    g = dyn.graph
    T = traj.T
    X, U = traj.stacked_x(), traj.stacked_u()
    alpha = X[:T] + beta * step.z
    mu = U + beta * step.v
    Xn = np.zeros_like(X)
    Un = np.zeros_like(U)
    Xn[0] = X[0]
    for t in range(T):
        Un[t] = mu[t] + step.K[t] @ (alpha[t] - Xn[t])
        xt = [Xn[t, g.xslice(i)] for i in range(g.N)]
        ut = [Un[t, g.uslice(i)] for i in range(g.N)]
        Xn[t + 1] = np.concatenate(dyn.step(xt, ut))
        if not np.all(np.isfinite(Xn[t + 1])):
            raise DivergenceError(-1, t + 1)
    return Trajectory.from_stacked(g, Xn, Un)


def centralized_oracle(dyn: DynamicsOverGraph, model: PolytopeModel, gains: np.ndarray, cfg: RunConfig,
                       initial: Trajectory) -> RunResult:
    """Matrix-form replica of :func:`run` without message passing."""
    iterates, costs, norms, warn = [initial], [total_cost(dyn, initial)], [], []
    status, err = "max_iter", None
    traj = initial
    for k in range(cfg.k_max + 1):
        rec: list = []
        step = oracle_direction(dyn, model, gains, traj, rec)
        warn.extend((k, "oracle", -1, w) for w in rec)
        nrm = float(max(np.max(np.abs(step.z), initial=0.0), np.max(np.abs(step.v), initial=0.0)))
        norms.append(nrm)
        if nrm < cfg.tol:
            status = "converged"
            break
        if k == cfg.k_max:
            break
        try:
            traj = oracle_update(dyn, step, traj, cfg.beta)
        except DivergenceError as exc:
            status, err = "diverged", str(exc)
            break
        iterates.append(traj)
        costs.append(total_cost(dyn, traj))
    return RunResult(iterates, costs, norms, RoundTrace(), warn, status, err)


def write_run_outputs(outdir, dyn: DynamicsOverGraph, result: RunResult) -> dict:
    """iterates.csv, cost.csv, trace.csv, warnings.csv in ``outdir``."""
    from pathlib import Path
    from .graph import write_iterates_csv
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("iterates", "cost", "trace", "warnings")}
    write_iterates_csv(paths["iterates"], result.iterates)
    with open(paths["cost"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "cost", "direction_norm", "defect"])
        for k, c in enumerate(result.costs):
            nrm = result.direction_norms[k] if k < len(result.direction_norms) else ""
            w.writerow([k, repr(c), repr(nrm) if nrm != "" else "",
                        repr(verify_trajectory(dyn, result.iterates[k]).max_defect)])
    result.trace.write_csv(paths["trace"])
    with open(paths["warnings"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "phase", "agent", "s", "value", "amin", "amax", "excess"])
        for k, phase, i, ev in result.warnings:
            ev: OutOfBox
            w.writerow([k, phase, i, ev.s, repr(ev.value), repr(ev.amin), repr(ev.amax), repr(ev.excess)])
    return paths
