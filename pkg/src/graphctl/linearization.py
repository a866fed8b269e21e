"""Linearization along trajectories and per-entry interval bounds."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .graph import Curve, DynamicsOverGraph, GraphModel, StructureError


class EvaluationError(RuntimeError):
    def __init__(self, i, j, t):
        self.i, self.j, self.t = i, j, t
        super().__init__(f"non-finite partial d f_{i}/d x_{j} at t={t}")


@dataclass(frozen=True)
class LinearizationSequence:
    """``A[t]`` is the (nx, nx) Jacobian of the stacked dynamics at time t; ``B`` is constant."""

    graph: GraphModel
    A: np.ndarray  # (T, nx, nx)
    B: np.ndarray  # (nx, nu)

    @property
    def T(self) -> int:
        return self.A.shape[0]

    def block(self, t: int, i: int, j: int) -> np.ndarray:
        g = self.graph
        return self.A[t, g.xslice(i), g.xslice(j)]

    def b_block(self, i: int) -> np.ndarray:
        g = self.graph
        return self.B[g.xslice(i), g.uslice(i)]


def input_matrix(dyn: DynamicsOverGraph) -> np.ndarray:
    g = dyn.graph
    B = np.zeros((g.nx, g.nu))
    for i in range(g.N):
        B[g.xslice(i), g.uslice(i)] = dyn.dfdu(i)
    return B


def linearize_point(dyn: DynamicsOverGraph, x: Sequence[np.ndarray], u: Sequence[np.ndarray], t: int,
                    out: np.ndarray | None = None) -> np.ndarray:
    g = dyn.graph
    A = np.zeros((g.nx, g.nx)) if out is None else out
    for i in range(g.N):
        blocks = dyn.dfdx(i, dyn.neighbor_states(x, i, t), u[i][t])
        for j, blk in zip(g.neighbors[i], blocks):
            if not np.all(np.isfinite(blk)):
                raise EvaluationError(i, j, t)
            A[g.xslice(i), g.xslice(j)] = blk
    return A


def linearize_along(dyn: DynamicsOverGraph, traj: Curve) -> LinearizationSequence:
    traj.check(dyn.graph)
    g = dyn.graph
    A = np.zeros((traj.T, g.nx, g.nx))
    for t in range(traj.T):
        linearize_point(dyn, traj.x, traj.u, t, out=A[t])
    return LinearizationSequence(g, A, input_matrix(dyn))


@dataclass(frozen=True)
class EntryBounds:
    """Interval bounds for every scalar entry inside the blocks a_(i,j), j in N_i.

    Entries are listed in row-major order of their global position.  The
    varying entries (``amin < amax``) are numbered ``s = 0..S_param-1`` in
    that order; the others are constant and folded into a base matrix.
    """

    graph: GraphModel
    i: np.ndarray
    j: np.ndarray
    row: np.ndarray
    col: np.ndarray
    amin: np.ndarray
    amax: np.ndarray
    constant: np.ndarray

    def __post_init__(self):
        if np.any(self.amin > self.amax):
            raise ValueError("amin must not exceed amax")
        bad = ~self.constant & (self.amin == self.amax)
        if np.any(bad):
            raise ValueError("degenerate interval on a varying entry; fold it into the constants")

    @property
    def rows(self) -> np.ndarray:
        """Global row index of each entry."""
        return np.asarray(self.graph.x_offsets)[self.i] + self.row

    @property
    def cols(self) -> np.ndarray:
        return np.asarray(self.graph.x_offsets)[self.j] + self.col

    @property
    def varying(self) -> np.ndarray:
        """Entry indices of the varying set, ordered by s."""
        return np.flatnonzero(~self.constant)

    @property
    def S_param(self) -> int:
        return int(np.count_nonzero(~self.constant))

    def base_matrix(self) -> np.ndarray:
        g = self.graph
        A = np.zeros((g.nx, g.nx))
        c = self.constant
        A[self.rows[c], self.cols[c]] = self.amin[c]
        return A

    def values(self, A: np.ndarray) -> np.ndarray:
        """Varying entry values a(s) read from a full matrix (or stack of matrices)."""
        v = self.varying
        return A[..., self.rows[v], self.cols[v]]

    def s_of(self, i: int, j: int) -> np.ndarray:
        """Varying indices s belonging to block (i, j)."""
        v = self.varying
        return np.flatnonzero((self.i[v] == i) & (self.j[v] == j))


def _entry_index(graph: GraphModel):
    idx = [(i, j, r, c) for i in range(graph.N) for r in range(graph.state_dims[i])
           for j in graph.neighbors[i] for c in range(graph.state_dims[j])]
    a = np.array(idx, dtype=int).reshape(-1, 4)
    return a[:, 0], a[:, 1], a[:, 2], a[:, 3]


def bounds_from_intervals(graph: GraphModel, lo: np.ndarray, hi: np.ndarray,
                          constant: np.ndarray | None = None) -> EntryBounds:
    """Bounds from full (nx, nx) lower/upper matrices on the graph pattern."""
    i, j, r, c = _entry_index(graph)
    off = np.asarray(graph.x_offsets)
    R, C = off[i] + r, off[j] + c
    amin, amax = lo[R, C].astype(float), hi[R, C].astype(float)
    const = (amin == amax) if constant is None else constant[R, C].astype(bool)
    return EntryBounds(graph, i, j, r, c, amin, amax, const)


def estimate_bounds(dyn: DynamicsOverGraph, samples: Iterable[Curve], margin: float = 0.10,
                    fold_constant: bool = True) -> EntryBounds:
    """Per-entry [min, max] over all sampled times, inflated by ``margin``.

    A nondegenerate interval grows by ``margin * (max - min)`` on each side.
    A degenerate one becomes a constant entry if ``fold_constant`` or
    ``margin == 0``; otherwise it grows by ``margin * max(1, |value|)``.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    g = dyn.graph
    lo = hi = None
    for traj in samples:
        seq = linearize_along(dyn, traj)
        if seq.T == 0:
            continue
        a_lo, a_hi = seq.A.min(axis=0), seq.A.max(axis=0)
        lo = a_lo if lo is None else np.minimum(lo, a_lo)
        hi = a_hi if hi is None else np.maximum(hi, a_hi)
    if lo is None:
        raise ValueError("at least one sample trajectory with T >= 1 is required")
    width = hi - lo
    const = (width == 0) & (fold_constant or margin == 0)
    pad = np.where(width > 0, margin * width, margin * np.maximum(1.0, np.abs(lo)))
    pad[const] = 0.0
    return bounds_from_intervals(g, lo - pad, hi + pad, const)


@dataclass(frozen=True)
class Violation:
    entry: int  # index into the EntryBounds arrays
    s: int      # varying index, -1 for a constant entry
    t: int
    value: float
    excess: float


def check_in_bounds(seq: LinearizationSequence, bounds: EntryBounds, tol: float = 0.0) -> list[Violation]:
    """Entries of ``seq`` outside their interval; empty list means compliant."""
    if seq.graph != bounds.graph:
        raise StructureError("linearization and bounds refer to different graphs")
    vals = seq.A[:, bounds.rows, bounds.cols]  # (T, n_entries)
    below = bounds.amin - vals
    above = vals - bounds.amax
    excess = np.maximum(below, above)
    s_index = np.full(len(bounds.amin), -1)
    s_index[bounds.varying] = np.arange(bounds.S_param)
    out = []
    for t, e in zip(*np.nonzero(excess > tol)):
        out.append(Violation(int(e), int(s_index[e]), int(t), float(vals[t, e]), float(excess[t, e])))
    return out


def write_bounds_csv(path, bounds: EntryBounds) -> None:
    s_index = np.full(len(bounds.amin), -1)
    s_index[bounds.varying] = np.arange(bounds.S_param)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "i", "j", "row", "col", "amin", "amax", "constant"])
        for e in range(len(bounds.amin)):
            w.writerow([s_index[e], bounds.i[e], bounds.j[e], bounds.row[e], bounds.col[e],
                        repr(float(bounds.amin[e])), repr(float(bounds.amax[e])), int(bounds.constant[e])])


def read_bounds_csv(path, graph: GraphModel) -> EntryBounds:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ref = _entry_index(graph)
    got = tuple(np.array([int(r[k]) for r in rows], dtype=int) for k in ("i", "j", "row", "col"))
    if len(rows) != len(ref[0]) or any(not np.array_equal(a, b) for a, b in zip(ref, got)):
        raise StructureError(f"{path} does not match the graph's entry layout")
    return EntryBounds(graph, *got,
                       np.array([float(r["amin"]) for r in rows]),
                       np.array([float(r["amax"]) for r in rows]),
                       np.array([r["constant"].strip() in ("1", "True", "true") for r in rows]))
