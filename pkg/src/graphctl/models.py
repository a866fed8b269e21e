"""Concrete dynamics over graphs and the name registry used by the CLI."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .graph import DynamicsOverGraph, GraphModel, QuadraticCost, StructureError


class LinearGraphDynamics(DynamicsOverGraph):
    """``x_i+ = sum_{j in N_i} A_ij x_j + B_ii u_i`` with A restricted to the graph pattern."""

    def __init__(self, graph: GraphModel, A, B, x0, cost: QuadraticCost | None = None):
        self.graph = graph
        self.A = np.atleast_2d(np.asarray(A, float))
        self.B = np.atleast_2d(np.asarray(B, float))
        if self.A.shape != (graph.nx, graph.nx) or self.B.shape != (graph.nx, graph.nu):
            raise StructureError("A must be (nx, nx) and B (nx, nu)")
        if np.any(self.A[graph.state_mask() == 0] != 0):
            raise StructureError("A has entries outside the graph pattern")
        bmask = np.zeros_like(self.B)
        for i in range(graph.N):
            bmask[graph.xslice(i), graph.uslice(i)] = 1
        if np.any(self.B[bmask == 0] != 0):
            raise StructureError("B must be block diagonal")
        self.x0 = tuple(np.atleast_1d(np.asarray(v, float)) for v in x0)
        self.cost = cost or QuadraticCost.identity(graph)
        g = graph
        self._blocks = [[self.A[g.xslice(i), g.xslice(j)] for j in g.neighbors[i]] for i in range(g.N)]
        self._b = [self.B[g.xslice(i), g.uslice(i)] for i in range(g.N)]

    def f(self, i, xn, u):
        out = self._b[i] @ u
        for a, xj in zip(self._blocks[i], xn):
            out = out + a @ xj
        return out

    def dfdx(self, i, xn, u):
        return [a.copy() for a in self._blocks[i]]

    def dfdu(self, i):
        return self._b[i].copy()


def consensus(N: int = 3, h: float = 0.1, b: float = 1.0, x0=None, q=1.0, r=1.0, qf=1.0) -> LinearGraphDynamics:
    """Scalar Euler-discretized consensus on a cycle: ``x+ = (I - h L) x + b u``."""
    g = GraphModel.cycle(N)
    L = np.diag(g.adjacency().sum(1) - 1) - (g.adjacency() - np.eye(N))
    x0 = np.linspace(1.0, -1.0, N) if x0 is None else x0
    return LinearGraphDynamics(g, np.eye(N) - h * L, b * np.eye(N), [np.array([v]) for v in x0],
                               QuadraticCost.identity(g, q, r, qf))


def scalar_plant(a: float = 1.2, b: float = 1.0, x0: float = 1.0, q=1.0, r=1.0, qf=1.0) -> LinearGraphDynamics:
    g = GraphModel.cycle(1)
    return LinearGraphDynamics(g, [[a]], [[b]], [np.array([x0])], QuadraticCost.identity(g, q, r, qf))


REGISTRY: dict[str, Callable[..., DynamicsOverGraph]] = {
    "consensus": consensus,
    "scalar": scalar_plant,
}


def register(name: str):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def make_dynamics(name: str, **params) -> DynamicsOverGraph:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown dynamics {name!r}; known: {sorted(REGISTRY)}") from None
    return factory(**params)
