"""Per-entry polytopic representation of the linearization family.

Each varying entry ``s`` contributes two vertices: the base matrix plus
``S * amin_s`` (vertex ``s``) or ``S * amax_s`` (vertex ``s + S``) at that
entry, where ``S`` is the number of varying entries.  The coefficients

    theta_s     = lam_s / S
    theta_{s+S} = (1 - lam_s) / S,   lam_s = (amax_s - a_s) / (amax_s - amin_s)

lie in the simplex and reproduce the matrix exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linearization import EntryBounds

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class OutOfBox:
    s: int
    value: float
    amin: float
    amax: float

    @property
    def excess(self) -> float:
        return max(self.amin - self.value, self.value - self.amax)


@dataclass(frozen=True)
class PolytopeModel:
    bounds: EntryBounds
    base: np.ndarray       # (nx, nx) constant entries
    vertices: np.ndarray   # (P, nx, nx)
    state_masks: np.ndarray  # (P, nx, nx) block pattern of each vertex
    gain_masks: np.ndarray   # (P, nu, nx) admissible support of each vertex gain
    mask_mode: str

    @property
    def S_param(self) -> int:
        return self.bounds.S_param

    @property
    def P(self) -> int:
        return self.vertices.shape[0]

    def vertex_block(self, p: int) -> tuple[int, int]:
        """Owner block (i, j) of the varying entry of vertex p."""
        e = self.bounds.varying[p % self.S_param]
        return int(self.bounds.i[e]), int(self.bounds.j[e])


def build_polytope(bounds: EntryBounds, base: np.ndarray | None = None,
                   mask_mode: str = "single") -> PolytopeModel:
    """Vertex matrices and gain masks.

    ``mask_mode="single"`` lets vertex gain p act only on the block that owns
    its varying entry, which keeps the online gain blend local to an edge.
    ``mask_mode="pattern"`` allows every block where the vertex matrix
    (base included) is nonzero.
    """
    if mask_mode not in ("single", "pattern"):
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    S = bounds.S_param
    if S < 1:
        raise ValueError("polytope needs at least one varying entry")
    v = bounds.varying
    if np.any(bounds.amin[v] == bounds.amax[v]):
        raise ValueError("degenerate interval inside the varying set")
    g = bounds.graph
    base = bounds.base_matrix() if base is None else np.asarray(base, float)
    rows, cols = bounds.rows[v], bounds.cols[v]
    P = 2 * S
    V = np.repeat(base[None], P, axis=0)
    V[np.arange(S), rows, cols] += S * bounds.amin[v]
    V[S + np.arange(S), rows, cols] += S * bounds.amax[v]

    xo, uo = g.x_offsets, g.u_offsets
    smask = np.zeros((P, g.nx, g.nx))
    kmask = np.zeros((P, g.nu, g.nx))
    for p in range(P):
        e = v[p % S]
        i, j = bounds.i[e], bounds.j[e]
        if mask_mode == "single":
            blocks = [(i, j)]
        else:
            blocks = [(a, b) for a in range(g.N) for b in g.neighbors[a]
                      if np.any(V[p, xo[a]:xo[a + 1], xo[b]:xo[b + 1]] != 0)]
        for a, b in blocks:
            smask[p, xo[a]:xo[a + 1], xo[b]:xo[b + 1]] = 1.0
            kmask[p, uo[a]:uo[a + 1], xo[b]:xo[b + 1]] = 1.0
    return PolytopeModel(bounds, base, V, smask, kmask, mask_mode)


def _entry_values(model: PolytopeModel, a) -> np.ndarray:
    a = np.asarray(a, float)
    nx = model.base.shape[0]
    if a.ndim >= 2 and a.shape[-2:] == (nx, nx):
        return model.bounds.values(a)
    return a


def lambdas(model: PolytopeModel, a, record: list | None = None) -> np.ndarray:
    """Clipped ``lam_s = (amax - a)/(amax - amin)``; out-of-box values are logged to ``record``."""
    b = model.bounds
    v = b.varying
    vals = _entry_values(model, a)
    lo, hi = b.amin[v], b.amax[v]
    if record is not None:
        flat = vals.reshape(-1, len(v))
        for row in flat:
            for s in np.flatnonzero((row < lo) | (row > hi)):
                record.append(OutOfBox(int(s), float(row[s]), float(lo[s]), float(hi[s])))
    return (hi - np.clip(vals, lo, hi)) / (hi - lo)


def coefficients(model: PolytopeModel, a, record: list | None = None) -> np.ndarray:
    """Vertex coefficients theta (length P, or (..., P) for stacked input).

    ``a`` is either the full (nx, nx) matrix, a stack of them, or the vector
    of varying entry values.
    """
    lam = lambdas(model, a, record)
    S = model.S_param
    return np.concatenate([lam / S, (1.0 - lam) / S], axis=-1)


def blend(theta: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """``sum_p theta_p mats[p]``; ``theta`` may be stacked as (..., P)."""
    return np.tensordot(theta, mats, axes=([-1], [0]))


def reconstruct(model: PolytopeModel, theta: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    theta = np.asarray(theta, float)
    if theta.shape[-1] != model.P:
        raise ValueError(f"expected {model.P} coefficients")
    if np.any(theta < -tol) or np.any(np.abs(theta.sum(axis=-1) - 1.0) > tol):
        raise ValueError("coefficients are not in the unit simplex")
    return blend(theta, model.vertices)
