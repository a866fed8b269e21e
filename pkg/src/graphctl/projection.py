"""Local gain reconstruction and the projection operator over the graph.

Agent ``i`` stores, for each neighbor ``j``, the lower/upper vertex gain
blocks and the entry bounds of the two blocks (i, j) and (j, i).  From the
current linearization block it blends

    k_t(i,j) = 1/S sum_{s in (i,j)} [ lam_s K_lower_s + (1 - lam_s) K_upper_s ]

which is the (i, j) block of ``sum_p theta_p K_p``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import Curve, DivergenceError, DynamicsOverGraph, GraphModel, Trajectory
from .linearization import LinearizationSequence
from .polytope import OutOfBox, PolytopeModel, blend, coefficients


class LocalityError(KeyError):
    pass


class ConfigurationError(ValueError):
    pass


class ProjectionError(DivergenceError):
    pass


@dataclass(frozen=True)
class BlockGains:
    """Vertex data of one gain block: entry positions inside the block, bounds, gains."""

    s: np.ndarray        # global varying indices
    row: np.ndarray      # entry position inside the a-block
    col: np.ndarray
    amin: np.ndarray
    amax: np.ndarray
    lower: np.ndarray    # (len(s), m_owner, n_col) blocks of K_lower_s
    upper: np.ndarray
    shape: tuple[int, int]


@dataclass(frozen=True)
class LocalGainTable:
    """Everything agent ``i`` needs to build k_t(i,j) and k_t(j,i) for j in N_i."""

    agent: int
    neighbors: tuple[int, ...]
    S_param: int
    row: dict = field(default_factory=dict)   # j -> BlockGains for block (i, j)
    col: dict = field(default_factory=dict)   # j -> BlockGains for block (j, i)

    def entries(self) -> set[tuple[int, int]]:
        return {(self.agent, j) for j in self.row} | {(j, self.agent) for j in self.col}


def _block_gains(model: PolytopeModel, gains: np.ndarray, i: int, j: int) -> BlockGains:
    b = model.bounds
    g = b.graph
    S = b.S_param
    s = b.s_of(i, j)
    e = b.varying[s]
    us, xs = g.uslice(i), g.xslice(j)
    return BlockGains(s, b.row[e], b.col[e], b.amin[e], b.amax[e],
                      gains[s][:, us, xs], gains[s + S][:, us, xs],
                      (g.input_dims[i], g.state_dims[j]))


def build_gain_tables(model: PolytopeModel, gains: np.ndarray) -> list[LocalGainTable]:
    """Split vertex gains into per-agent tables.

    Requires every vertex gain to live in the block of its own varying entry,
    otherwise the blend would need coefficients from outside the edge.
    """
    g = model.bounds.graph
    for p in range(model.P):
        i, j = model.vertex_block(p)
        own = np.zeros_like(gains[p], dtype=bool)
        own[g.uslice(i), g.xslice(j)] = True
        if np.any(gains[p][~own] != 0):
            raise ConfigurationError(f"vertex gain {p} has support outside block {(i, j)}")
    tables = []
    for i in range(g.N):
        nb = g.neighbors[i]
        tables.append(LocalGainTable(
            i, nb, model.S_param,
            row={j: _block_gains(model, gains, i, j) for j in nb},
            col={j: _block_gains(model, gains, j, i) for j in nb}))
    return tables


def _blend_block(bg: BlockGains, a_block: np.ndarray, S: int, record: list | None, owner=None) -> np.ndarray:
    if len(bg.s) == 0:
        return np.zeros(bg.shape)
    a = np.asarray(a_block)[bg.row, bg.col]
    if record is not None:
        for n in np.flatnonzero((a < bg.amin) | (a > bg.amax)):
            record.append(OutOfBox(int(bg.s[n]), float(a[n]), float(bg.amin[n]), float(bg.amax[n])))
    lam = (bg.amax - np.clip(a, bg.amin, bg.amax)) / (bg.amax - bg.amin)
    n = len(lam)
    k = (lam / S) @ bg.lower.reshape(n, -1) + ((1.0 - lam) / S) @ bg.upper.reshape(n, -1)
    return k.reshape(bg.shape)


def local_gain(table: LocalGainTable, direction: str, j: int, a_block: np.ndarray,
               record: list | None = None) -> np.ndarray:
    """``direction="row"`` gives k_t(i,j) from a_t(i,j); ``"col"`` gives k_t(j,i) from a_t(j,i)."""
    if j not in table.neighbors:
        raise LocalityError(f"agent {table.agent} has no gain data for non-neighbor {j}")
    if direction == "row":
        bg = table.row[j]
    elif direction == "col":
        bg = table.col[j]
    else:
        raise ValueError("direction must be 'row' or 'col'")
    if np.any(bg.amax <= bg.amin):
        raise ConfigurationError("degenerate bounds on a varying entry")
    return _blend_block(bg, a_block, table.S_param, record)


def central_gains(model: PolytopeModel, gains: np.ndarray, A: np.ndarray,
                  record: list | None = None) -> np.ndarray:
    """``sum_p theta_p(A_t) K_p`` for a single matrix or a (T, nx, nx) stack."""
    return blend(coefficients(model, A, record), gains)


def local_gain_schedule(tables: Sequence[LocalGainTable], seq: LinearizationSequence,
                        record: list | None = None) -> np.ndarray:
    """Stack every agent's k_t(i,j) into (T, nu, nx) gain matrices."""
    g = seq.graph
    K = np.zeros((seq.T, g.nu, g.nx))
    for t in range(seq.T):
        for tab in tables:
            i = tab.agent
            for j in tab.neighbors:
                K[t, g.uslice(i), g.xslice(j)] = local_gain(tab, "row", j, seq.block(t, i, j), record)
    return K


def project(dyn: DynamicsOverGraph, gains: np.ndarray, curve: Curve,
            x0: Sequence[np.ndarray] | None = None) -> Trajectory:
    """Map a curve to a trajectory through ``u = mu + K_t (alpha - x)``.

    ``gains`` is a (T, nu, nx) stack; only its neighbor blocks are read.
    The initial state is ``alpha_0`` unless ``x0`` is given.
    """
    g = dyn.graph
    curve.check(g)
    T = curve.T
    gains = np.asarray(gains, float)
    if gains.shape != (T, g.nu, g.nx):
        raise ValueError(f"gains must have shape {(T, g.nu, g.nx)}")
    alpha, mu = curve.x, curve.u
    x = [np.empty((T + 1, g.state_dims[i])) for i in range(g.N)]
    u = [np.empty((T, g.input_dims[i])) for i in range(g.N)]
    for i in range(g.N):
        x[i][0] = alpha[i][0] if x0 is None else x0[i]
    for t in range(T):
        Kt = gains[t]
        for i in range(g.N):
            ui = mu[i][t].copy()
            for j in g.neighbors[i]:
                ui = ui + Kt[g.uslice(i), g.xslice(j)] @ (alpha[j][t] - x[j][t])
            u[i][t] = ui
        for i in range(g.N):
            x[i][t + 1] = dyn.f(i, dyn.neighbor_states(x, i, t), u[i][t])
            if not np.all(np.isfinite(x[i][t + 1])):
                raise ProjectionError(i, t + 1, f"projection diverged for agent {i} at t={t + 1}")
    return Trajectory(tuple(x), tuple(u))


def assembled_sparsity_violation(graph: GraphModel, K: np.ndarray) -> float:
    """Largest |entry| of K (or a stack) outside the admissible neighbor blocks."""
    return float(np.max(np.abs(np.asarray(K) * (1 - graph.gain_mask())), initial=0.0))
