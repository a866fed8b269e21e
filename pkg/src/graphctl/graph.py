"""Graphs, dynamics over graphs, and the state-input containers.

Every agent ``i`` has a state block ``x_i`` of size ``n_i`` and an input
block ``u_i`` of size ``m_i``.  Its next state depends only on the states of
its neighbors ``N_i`` (which always contains ``i`` itself) and on its own
input.  Blocks are stored per agent; stacked views follow the agent order.
"""
from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FEASIBILITY_TOL = 1e-10


class StructureError(ValueError):
    """Shapes or neighbor structure do not match the graph."""


class DivergenceError(RuntimeError):
    """A rollout produced a non-finite state."""

    def __init__(self, agent: int, t: int, msg: str = ""):
        self.agent = agent
        self.t = t
        super().__init__(msg or f"non-finite state for agent {agent} at t={t}")


@dataclass(frozen=True)
class GraphModel:
    """Undirected, connected graph with explicit self-loops.

    ``neighbors[i]`` is the sorted tuple ``N_i``; it must contain ``i``.
    """

    neighbors: tuple[tuple[int, ...], ...]
    state_dims: tuple[int, ...]
    input_dims: tuple[int, ...]

    def __post_init__(self):
        nbrs = tuple(tuple(sorted(set(int(j) for j in n))) for n in self.neighbors)
        object.__setattr__(self, "neighbors", nbrs)
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        N = len(nbrs)
        if N == 0:
            raise StructureError("graph needs at least one agent")
        if len(self.state_dims) != N or len(self.input_dims) != N:
            raise StructureError("one state and input dimension per agent required")
        if min(self.state_dims) < 1 or min(self.input_dims) < 1:
            raise StructureError("block dimensions must be positive")
        for i, n in enumerate(nbrs):
            if i not in n:
                raise StructureError(f"agent {i} missing from its own neighbor set")
            for j in n:
                if not 0 <= j < N:
                    raise StructureError(f"neighbor {j} of agent {i} out of range")
                if i not in nbrs[j]:
                    raise StructureError(f"edge ({i},{j}) is not symmetric")
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in nbrs[i]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        if len(seen) != N:
            raise StructureError("graph is not connected")

    @classmethod
    def from_edges(cls, N: int, edges: Iterable[tuple[int, int]], n: int | Sequence[int] = 1,
                   m: int | Sequence[int] = 1) -> "GraphModel":
        nbrs = [{i} for i in range(N)]
        for i, j in edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        n = [n] * N if np.isscalar(n) else list(n)
        m = [m] * N if np.isscalar(m) else list(m)
        return cls(tuple(tuple(s) for s in nbrs), tuple(n), tuple(m))

    @classmethod
    def cycle(cls, N: int, n: int = 1, m: int = 1) -> "GraphModel":
        if N == 1:
            return cls.from_edges(1, [], n, m)
        return cls.from_edges(N, [(i, (i + 1) % N) for i in range(N)], n, m)

    @property
    def N(self) -> int:
        return len(self.neighbors)

    @property
    def S(self) -> int:
        """Number of nonzero blocks of the adjacency pattern, sum of |N_i|."""
        return sum(len(n) for n in self.neighbors)

    @property
    def nx(self) -> int:
        return sum(self.state_dims)

    @property
    def nu(self) -> int:
        return sum(self.input_dims)

    @property
    def x_offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.state_dims)]).astype(int))

    @property
    def u_offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.input_dims)]).astype(int))

    def xslice(self, i: int) -> slice:
        o = self.x_offsets
        return slice(o[i], o[i + 1])

    def uslice(self, i: int) -> slice:
        o = self.u_offsets
        return slice(o[i], o[i + 1])

    def is_edge(self, i: int, j: int) -> bool:
        return j in self.neighbors[i]

    def adjacency(self) -> np.ndarray:
        """Agent-level adjacency with unit diagonal."""
        A = np.zeros((self.N, self.N))
        for i, n in enumerate(self.neighbors):
            A[i, list(n)] = 1.0
        return A

    def state_mask(self) -> np.ndarray:
        """Scalar-level mask (nx by nx) of the blocks a_(i,j), j in N_i."""
        M = np.zeros((self.nx, self.nx))
        for i, n in enumerate(self.neighbors):
            for j in n:
                M[self.xslice(i), self.xslice(j)] = 1.0
        return M

    def gain_mask(self) -> np.ndarray:
        """Scalar-level mask (nu by nx) of the admissible gain blocks k_(i,j)."""
        M = np.zeros((self.nu, self.nx))
        for i, n in enumerate(self.neighbors):
            for j in n:
                M[self.uslice(i), self.xslice(j)] = 1.0
        return M

    def directed_edges(self) -> list[tuple[int, int]]:
        """All (i, j) with j in N_i and j != i."""
        return [(i, j) for i, n in enumerate(self.neighbors) for j in n if j != i]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Curve:
    """State-input curve: ``x[i]`` has shape (T+1, n_i), ``u[i]`` shape (T, m_i).

    No dynamics constraint is implied.
    """

    x: tuple[np.ndarray, ...]
    u: tuple[np.ndarray, ...]

    def __post_init__(self):
        x = tuple(_frozen(np.atleast_2d(np.asarray(xi, dtype=float).T).T) for xi in self.x)
        u = tuple(_frozen(np.atleast_2d(np.asarray(ui, dtype=float).T).T) for ui in self.u)
        if len(x) != len(u):
            raise StructureError("x and u must have one block per agent")
        T = x[0].shape[0] - 1
        for xi, ui in zip(x, u):
            if xi.ndim != 2 or ui.ndim != 2 or xi.shape[0] != T + 1 or ui.shape[0] != T:
                raise StructureError("inconsistent horizon between agents")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    @property
    def T(self) -> int:
        return self.x[0].shape[0] - 1

    @property
    def N(self) -> int:
        return len(self.x)

    def check(self, graph: GraphModel) -> None:
        if self.N != graph.N:
            raise StructureError(f"curve has {self.N} agents, graph has {graph.N}")
        for i in range(graph.N):
            if self.x[i].shape[1] != graph.state_dims[i] or self.u[i].shape[1] != graph.input_dims[i]:
                raise StructureError(f"block size mismatch for agent {i}")

    def stacked_x(self) -> np.ndarray:
        return np.hstack(self.x)

    def stacked_u(self) -> np.ndarray:
        return np.hstack(self.u)

    @classmethod
    def from_stacked(cls, graph: GraphModel, X: np.ndarray, U: np.ndarray):
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        return cls(tuple(X[:, graph.xslice(i)] for i in range(graph.N)),
                   tuple(U[:, graph.uslice(i)] for i in range(graph.N)))

    def as_curve(self) -> "Curve":
        return Curve(self.x, self.u)


class Trajectory(Curve):
    """A curve that satisfies the dynamics; built by :func:`rollout` or projection."""


class DynamicsOverGraph(ABC):
    """Per-agent dynamics ``x_i+ = f_i(x_{N_i}, u_i)`` with separable costs.

    ``xn`` arguments are sequences of neighbor state blocks ordered like
    ``graph.neighbors[i]``.  Costs are delegated to ``self.cost`` when the
    subclass does not override them.
    """

    graph: GraphModel
    x0: tuple[np.ndarray, ...]
    cost: "QuadraticCost"

    @abstractmethod
    def f(self, i: int, xn: Sequence[np.ndarray], u: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def dfdx(self, i: int, xn: Sequence[np.ndarray], u: np.ndarray) -> list[np.ndarray]:
        """Blocks d f_i / d x_j (n_i by n_j), one per j in N_i in neighbor order."""

    @abstractmethod
    def dfdu(self, i: int) -> np.ndarray:
        """Constant block d f_i / d u_i (n_i by m_i)."""

    def stage_cost(self, i, x, u) -> float:
        return self.cost.stage(i, x, u)

    def stage_grad(self, i, x, u) -> tuple[np.ndarray, np.ndarray]:
        return self.cost.stage_grad(i, x, u)

    def terminal_cost(self, i, x) -> float:
        return self.cost.terminal(i, x)

    def terminal_grad(self, i, x) -> np.ndarray:
        return self.cost.terminal_grad(i, x)

    def neighbor_states(self, x: Sequence[np.ndarray], i: int, t: int) -> list[np.ndarray]:
        return [x[j][t] for j in self.graph.neighbors[i]]

    def step(self, xt: Sequence[np.ndarray], ut: Sequence[np.ndarray]) -> list[np.ndarray]:
        """One synchronous step of all agents from per-agent blocks at a single time."""
        return [self.f(i, [xt[j] for j in self.graph.neighbors[i]], ut[i])
                for i in range(self.graph.N)]


@dataclass
class QuadraticCost:
    """Per-agent tracking cost.

    ``l_i = 1/2 (x - xr_i)' Q_i (x - xr_i) + 1/2 (u - ur_i)' R_i (u - ur_i)`` and
    ``m_i = 1/2 (x - xr_i)' Qf_i (x - xr_i)``.
    """

    Q: list[np.ndarray]
    R: list[np.ndarray]
    Qf: list[np.ndarray]
    x_ref: list[np.ndarray] = field(default=None)
    u_ref: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.Q = [np.atleast_2d(np.asarray(q, float)) for q in self.Q]
        self.R = [np.atleast_2d(np.asarray(r, float)) for r in self.R]
        self.Qf = [np.atleast_2d(np.asarray(q, float)) for q in self.Qf]
        if self.x_ref is None:
            self.x_ref = [np.zeros(q.shape[0]) for q in self.Q]
        if self.u_ref is None:
            self.u_ref = [np.zeros(r.shape[0]) for r in self.R]
        self.x_ref = [np.atleast_1d(np.asarray(v, float)) for v in self.x_ref]
        self.u_ref = [np.atleast_1d(np.asarray(v, float)) for v in self.u_ref]

    @classmethod
    def identity(cls, graph: GraphModel, q=1.0, r=1.0, qf=1.0, x_ref=None, u_ref=None):
        n, m = graph.state_dims, graph.input_dims
        return cls([q * np.eye(k) for k in n], [r * np.eye(k) for k in m],
                   [qf * np.eye(k) for k in n], x_ref, u_ref)

    def stage(self, i, x, u):
        dx = x - self.x_ref[i]
        du = u - self.u_ref[i]
        return 0.5 * float(dx @ self.Q[i] @ dx + du @ self.R[i] @ du)

    def stage_grad(self, i, x, u):
        Q, R = self.Q[i], self.R[i]
        dx = x - self.x_ref[i]
        du = u - self.u_ref[i]
        return 0.5 * (Q + Q.T) @ dx, 0.5 * (R + R.T) @ du

    def terminal(self, i, x):
        dx = x - self.x_ref[i]
        return 0.5 * float(dx @ self.Qf[i] @ dx)

    def terminal_grad(self, i, x):
        Qf = self.Qf[i]
        return 0.5 * (Qf + Qf.T) @ (x - self.x_ref[i])


def _as_blocks(graph: GraphModel, u) -> list[np.ndarray]:
    if isinstance(u, np.ndarray):
        U = u.reshape(len(u), graph.nu)
        return [U[:, graph.uslice(i)] for i in range(graph.N)]
    if len(u) != graph.N:
        raise StructureError("one input block per agent required")
    return [np.asarray(ui, float).reshape(len(ui), graph.input_dims[i]) for i, ui in enumerate(u)]


def rollout(dyn: DynamicsOverGraph, inputs, x0: Sequence[np.ndarray] | None = None) -> Trajectory:
    """Open-loop simulation.  ``inputs`` is a stacked (T, nu) array or per-agent blocks."""
    g = dyn.graph
    u = _as_blocks(g, inputs)
    T = u[0].shape[0]
    for i in range(g.N):
        if u[i].shape != (T, g.input_dims[i]):
            raise StructureError(f"input block of agent {i} has shape {u[i].shape}")
    x0 = dyn.x0 if x0 is None else x0
    x = [np.empty((T + 1, g.state_dims[i])) for i in range(g.N)]
    for i in range(g.N):
        x[i][0] = x0[i]
    for t in range(T):
        for i in range(g.N):
            x[i][t + 1] = dyn.f(i, dyn.neighbor_states(x, i, t), u[i][t])
            if not np.all(np.isfinite(x[i][t + 1])):
                raise DivergenceError(i, t + 1)
    return Trajectory(tuple(x), tuple(u))


@dataclass(frozen=True)
class FeasibilityReport:
    defects: np.ndarray  # max defect over agents, per t in 0..T-1
    max_defect: float
    feasible: bool


def verify_trajectory(dyn: DynamicsOverGraph, curve: Curve, tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    curve.check(dyn.graph)
    g = dyn.graph
    d = np.zeros(curve.T)
    for t in range(curve.T):
        for i in range(g.N):
            r = curve.x[i][t + 1] - dyn.f(i, dyn.neighbor_states(curve.x, i, t), curve.u[i][t])
            d[t] = max(d[t], float(np.max(np.abs(r))))
    worst = float(d.max()) if d.size else 0.0
    return FeasibilityReport(d, worst, bool(worst <= tol))


def agent_cost(dyn: DynamicsOverGraph, curve: Curve, i: int) -> float:
    c = sum(dyn.stage_cost(i, curve.x[i][t], curve.u[i][t]) for t in range(curve.T))
    return c + dyn.terminal_cost(i, curve.x[i][curve.T])


def total_cost(dyn: DynamicsOverGraph, curve: Curve) -> float:
    """Sum over agents of stage costs plus terminal cost; defined on any curve."""
    curve.check(dyn.graph)
    return float(sum(agent_cost(dyn, curve, i) for i in range(dyn.graph.N)))


def check_partials(dyn: DynamicsOverGraph, n_points: int = 100, step: float = 1e-6,
                   scale: float = 1.0, rng=None) -> float:
    """Largest relative error between analytic partials and central differences.

    Points are drawn around ``dyn.x0`` with Gaussian spread ``scale``.
    Relative error is ``|J - J_fd| / max(1, |J|)`` elementwise.
    """
    rng = np.random.default_rng(rng)
    g = dyn.graph
    worst = 0.0
    for _ in range(n_points):
        i = int(rng.integers(g.N))
        xn = [dyn.x0[j] + scale * rng.standard_normal(g.state_dims[j]) for j in g.neighbors[i]]
        u = scale * rng.standard_normal(g.input_dims[i])
        blocks = dyn.dfdx(i, xn, u)
        for k, j in enumerate(g.neighbors[i]):
            fd = np.empty((g.state_dims[i], g.state_dims[j]))
            for c in range(g.state_dims[j]):
                xp = [v.copy() for v in xn]
                xm = [v.copy() for v in xn]
                xp[k][c] += step
                xm[k][c] -= step
                fd[:, c] = (dyn.f(i, xp, u) - dyn.f(i, xm, u)) / (2 * step)
            worst = max(worst, float(np.max(np.abs(blocks[k] - fd) / np.maximum(1.0, np.abs(blocks[k])))))
        Bi = dyn.dfdu(i)
        fd = np.empty_like(Bi)
        for c in range(g.input_dims[i]):
            e = np.zeros(g.input_dims[i])
            e[c] = step
            fd[:, c] = (dyn.f(i, xn, u + e) - dyn.f(i, xn, u - e)) / (2 * step)
        worst = max(worst, float(np.max(np.abs(Bi - fd) / np.maximum(1.0, np.abs(Bi)))))
    return worst


def write_iterates_csv(path, curves: Sequence[Curve], iters: Sequence[int] | None = None) -> None:
    """Columns: iter, agent, t, component, x, u (u blank at t = T or past m_i)."""
    iters = range(len(curves)) if iters is None else iters
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "agent", "t", "component", "x", "u"])
        for k, c in zip(iters, curves):
            for i in range(c.N):
                n, m = c.x[i].shape[1], c.u[i].shape[1]
                for t in range(c.T + 1):
                    for comp in range(max(n, m)):
                        xv = repr(float(c.x[i][t, comp])) if comp < n else ""
                        uv = repr(float(c.u[i][t, comp])) if (t < c.T and comp < m) else ""
                        w.writerow([k, i, t, comp, xv, uv])


def read_iterates_csv(path, graph: GraphModel) -> dict[int, Curve]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["iter"]), []).append(r)
    out = {}
    for k, rs in rows.items():
        T = max(int(r["t"]) for r in rs)
        x = [np.zeros((T + 1, n)) for n in graph.state_dims]
        u = [np.zeros((T, m)) for m in graph.input_dims]
        for r in rs:
            i, t, c = int(r["agent"]), int(r["t"]), int(r["component"])
            if r["x"] != "":
                x[i][t, c] = float(r["x"])
            if r["u"] != "":
                u[i][t, c] = float(r["u"])
        out[k] = Curve(tuple(x), tuple(u))
    return out
