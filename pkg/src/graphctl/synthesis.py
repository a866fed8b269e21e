"""Offline synthesis of sparse stabilizing vertex gains.

For every ordered pair of vertices (p, q) the block matrix

    [ G_p + G_p' - S_p      0      (A_p G_p - B R_p)'   (C G_p - D R_p)' ]
    [ 0                    nu I     0                    0               ]
    [ A_p G_p - B R_p       0       S_q                  0               ]
    [ C G_p - D R_p         0       0                    nu I            ]

must be positive definite, with S_p symmetric positive definite.  The vertex
gains are ``K_p = R_p G_p^{-1}``.  The sparsity requirement
``R_p G_p^{-1} o Adj_p^c = 0`` is nonconvex; it is handled by freezing
``G_p`` at the previous iterate ``Ghat_p`` (starting from the identity) and
repeating until ``G_p`` stops moving and the gains are sparse.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import cvxpy as cp
import numpy as np

from .polytope import PolytopeModel

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12
PAIRWISE_LIMIT = 1024  # above this many (p, q) pairs, "auto" coupling uses a common floor


class ConditioningError(ValueError):
    pass


class SolverFailure(RuntimeError):
    """Numerical failure of the SDP solver (not a certificate of infeasibility)."""


class SynthesisFailure(RuntimeError):
    def __init__(self, reason: str, h: int, history: list, best: "SynthesisCertificate | None" = None):
        self.reason, self.h, self.history, self.best = reason, h, history, best
        super().__init__(f"{reason} at iteration h={h}")


@dataclass
class LmiProblem:
    vertices: np.ndarray      # (P, nx, nx)
    B: np.ndarray             # (nx, nu)
    C: np.ndarray             # (ny, nx)
    D: np.ndarray             # (ny, nu)
    nu: float                 # performance level
    gain_masks: np.ndarray    # (P, nu, nx), 1 where the gain may be nonzero
    delta: float = 1e-6
    G_hat: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float)
        P, nx, _ = self.vertices.shape
        self.B = np.atleast_2d(np.asarray(self.B, float))
        self.C = np.atleast_2d(np.asarray(self.C, float))
        self.D = np.atleast_2d(np.asarray(self.D, float))
        nu_ = self.B.shape[1]
        if self.B.shape[0] != nx or self.C.shape[1] != nx or self.D.shape != (self.C.shape[0], nu_):
            raise ValueError("inconsistent B, C, D dimensions")
        if self.nu <= 0 or self.delta <= 0:
            raise ValueError("nu and delta must be positive")
        self.gain_masks = np.asarray(self.gain_masks, float)
        if self.gain_masks.shape != (P, nu_, nx):
            raise ValueError("gain_masks must be (P, nu, nx)")
        if self.G_hat is None:
            self.G_hat = np.repeat(np.eye(nx)[None], P, axis=0)

    @classmethod
    def from_polytope(cls, model: PolytopeModel, B, C=None, D=None, nu=1.0, delta=1e-6):
        nx = model.base.shape[0]
        B = np.atleast_2d(np.asarray(B, float))
        C = np.eye(nx) if C is None else C
        D = np.zeros((np.atleast_2d(C).shape[0], B.shape[1])) if D is None else D
        return cls(model.vertices, B, C, D, nu, model.gain_masks, delta)

    @property
    def P(self) -> int:
        return self.vertices.shape[0]

    @property
    def nx(self) -> int:
        return self.vertices.shape[1]


@dataclass
class SdpFeasibilityRequest:
    """cvxpy variables and constraints for one convexified subproblem."""

    S: list
    G: list
    R: list
    lmi: list            # one PSD constraint per (p, q) pair (or per p with a floor)
    spd: list
    floor: list
    sparsity: list       # empty unless equations are added explicitly
    n_sparsity: int      # scalar sparsity equations (enforced through the parametrization of R)
    objective: cp.Minimize | cp.Maximize
    pairs: list = field(default_factory=list)

    @property
    def constraints(self) -> list:
        return self.lmi + self.spd + self.floor + self.sparsity

    @property
    def constraint_count(self) -> int:
        """Matrix inequalities plus scalar sparsity equations."""
        return len(self.lmi) + len(self.spd) + len(self.floor) + self.n_sparsity


def _lmi_expr(Ap, B, C, D, nu, G, R, Sp, Sq):
    nx, ny = Ap.shape[0], C.shape[0]
    X = Ap @ G - B @ R
    Y = C @ G - D @ R
    M = cp.bmat([[G + G.T - Sp, X.T, Y.T],
                 [X, Sq, np.zeros((nx, ny))],
                 [Y, np.zeros((ny, nx)), nu * np.eye(ny)]])
    return 0.5 * (M + M.T)


def assemble_lmis(problem: LmiProblem, coupling: str = "auto", objective: str = "margin",
                  fix_G: bool = False) -> SdpFeasibilityRequest:
    """Build the convexified subproblem for the current ``G_hat``.

    ``coupling="pairwise"`` writes one matrix inequality per ordered pair
    (p, q).  ``coupling="floor"`` introduces W with ``S_q >= W`` for every q
    and one inequality per p with ``W`` in place of ``S_q``; since the block
    matrix is monotone in ``S_q`` this implies every pairwise inequality.
    ``"auto"`` picks pairwise unless P^2 exceeds ``PAIRWISE_LIMIT``.

    The decoupled constant ``nu I`` row is left out of the solver model.
    With ``fix_G`` the ``G_p`` are pinned to ``G_hat_p``, which makes the
    gains ``R_p G_p^{-1} = L_p`` exactly sparse.
    """
    P, nx = problem.P, problem.nx
    nu_ = problem.B.shape[1]
    ny = problem.C.shape[0]
    if coupling == "auto":
        coupling = "pairwise" if P * P <= PAIRWISE_LIMIT else "floor"
    if coupling not in ("pairwise", "floor"):
        raise ValueError(f"unknown coupling {coupling!r}")
    for p in range(P):
        if np.linalg.cond(problem.G_hat[p]) > MAX_CONDITION:
            raise ConditioningError(f"G_hat[{p}] is ill-conditioned")

    S = [cp.Variable((nx, nx), symmetric=True, name=f"S{p}") for p in range(P)]
    if fix_G:
        G = [cp.Constant(problem.G_hat[p]) for p in range(P)]
    else:
        G = [cp.Variable((nx, nx), name=f"G{p}") for p in range(P)]
    # R_p Ghat_p^{-1} o Adj_p^c = 0  <=>  R_p = L_p Ghat_p with L_p supported on the mask,
    # so the sparsity equations are imposed exactly through the parametrization
    R, n_sp = [], 0
    for p in range(P):
        mask = problem.gain_masks[p]
        r, c = np.nonzero(mask)
        n_sp += int(mask.size - len(r))
        if len(r) == 0:
            R.append(cp.Constant(np.zeros((nu_, nx))))
            continue
        ell = cp.Variable(len(r), name=f"L{p}")
        E = np.zeros((nu_ * nx, len(r)))
        E[r * nx + c, np.arange(len(r))] = 1.0
        L = cp.reshape(E @ ell, (nu_, nx), order="C")
        R.append(L @ problem.G_hat[p])
    d = problem.delta
    t = cp.Variable(name="margin") if objective == "margin" else None
    shift = d if t is None else t
    size = 2 * nx + ny

    lmi, pairs, floor = [], [], []
    if coupling == "pairwise":
        for p in range(P):
            for q in range(P):
                M = _lmi_expr(problem.vertices[p], problem.B, problem.C, problem.D, problem.nu,
                              G[p], R[p], S[p], S[q])
                lmi.append(M - shift * np.eye(size) >> 0)
                pairs.append((p, q))
    else:
        W = cp.Variable((nx, nx), symmetric=True, name="W")
        for p in range(P):
            M = _lmi_expr(problem.vertices[p], problem.B, problem.C, problem.D, problem.nu,
                          G[p], R[p], S[p], W)
            lmi.append(M - shift * np.eye(size) >> 0)
            pairs.append((p, None))
            floor.append(S[p] - W >> 0)
    spd = [S[p] - shift * np.eye(nx) >> 0 for p in range(P)]
    sparsity: list = []

    if objective == "margin":
        # margin is capped so that problems without a performance bound stay bounded
        obj = cp.Maximize(t)
        spd.append(t >= d)
        spd.append(t <= 1.0)
    elif objective == "trace":
        obj = cp.Minimize(sum(cp.trace(Sp) for Sp in S))
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return SdpFeasibilityRequest(S, G, R, lmi, spd, floor, sparsity, n_sp, obj, pairs)


@dataclass
class Witness:
    S: np.ndarray
    G: np.ndarray
    R: np.ndarray
    status: str
    value: float


def solve_feasibility(req: SdpFeasibilityRequest, solver: str = "CLARABEL", **opts) -> Witness | None:
    """Solve the request; ``None`` signals certified infeasibility."""
    if not req.constraints:
        return Witness(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), "optimal", 0.0)
    prob = cp.Problem(req.objective, req.constraints)
    try:
        prob.solve(solver=solver, **opts)
    except cp.SolverError as exc:
        raise SolverFailure(str(exc)) from exc
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return None
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverFailure(f"solver returned status {prob.status}")
    return Witness(np.array([v.value for v in req.S]), np.array([np.asarray(v.value, float) for v in req.G]),
                   np.array([np.asarray(v.value, float) for v in req.R]), prob.status, float(prob.value))


@dataclass
class SynthesisCertificate:
    gains: np.ndarray        # (P, nu, nx), masked K_p = R_p G_p^{-1}
    S: np.ndarray
    G: np.ndarray
    R: np.ndarray
    gain_masks: np.ndarray
    vertices: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    nu: float
    delta: float
    eps: float
    h: int
    history: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)

    @property
    def P(self) -> int:
        return self.gains.shape[0]

    @property
    def S_param(self) -> int:
        return self.P // 2

    @property
    def K_lower(self) -> np.ndarray:
        return self.gains[: self.S_param]

    @property
    def K_upper(self) -> np.ndarray:
        return self.gains[self.S_param:]


def lmi_matrix(Ap, B, C, D, nu, G, R, Sp, Sq) -> np.ndarray:
    """Full four-block matrix for one (p, q) pair, numerically."""
    nx, ny = Ap.shape[0], C.shape[0]
    X = Ap @ G - B @ R
    Y = C @ G - D @ R
    Z = np.zeros
    M = np.block([[G + G.T - Sp, Z((nx, nx)), X.T, Y.T],
                  [Z((nx, nx)), nu * np.eye(nx), Z((nx, nx)), Z((nx, ny))],
                  [X, Z((nx, nx)), Sq, Z((nx, ny))],
                  [Y, Z((ny, nx)), Z((ny, nx)), nu * np.eye(ny)]])
    return 0.5 * (M + M.T)


def lmi_min_eig(vertices, B, C, D, nu, S, G, R, delta) -> float:
    """Smallest eigenvalue over all (p, q) of the block matrix minus ``delta I``."""
    P = len(vertices)
    worst = np.inf
    for p in range(P):
        Ms = np.array([lmi_matrix(vertices[p], B, C, D, nu, G[p], R[p], S[p], S[q]) for q in range(P)])
        ev = np.linalg.eigvalsh(Ms)[:, 0].min() - delta
        worst = min(worst, ev)
    return float(worst)


def recheck(cert: SynthesisCertificate) -> dict:
    """Solver-independent residuals of a certificate.

    The LMIs are evaluated with ``R_p = K_p G_p`` built from the stored
    (masked) gains, i.e. for the controller that is actually deployed.
    """
    R_dep = cert.gains @ cert.G
    raw = cert.R @ np.linalg.inv(cert.G)
    P = cert.P
    cl = cert.vertices - cert.B @ cert.gains
    rho = np.array([np.max(np.abs(np.linalg.eigvals(cl[p]))) for p in range(P)])
    s_eig = np.array([np.linalg.eigvalsh(0.5 * (Sp + Sp.T))[0] for Sp in cert.S])
    return {
        "lmi_min_eig": lmi_min_eig(cert.vertices, cert.B, cert.C, cert.D, cert.nu, cert.S, cert.G, R_dep,
                                   cert.delta),
        "S_min_eig": float(s_eig.min()),
        "sparsity_violation": float(np.max(np.abs(raw * (1 - cert.gain_masks)))),
        "deployed_sparsity_violation": float(np.max(np.abs(cert.gains * (1 - cert.gain_masks)))),
        "max_spectral_radius": float(rho.max()),
        "spectral_radii": rho.tolist(),
    }


def certificate_ok(res: dict, lmi_tol: float = 1e-8, sparsity_tol: float = 1e-6) -> bool:
    return (res["lmi_min_eig"] >= -lmi_tol and res["S_min_eig"] > 0
            and res["sparsity_violation"] < sparsity_tol and res["max_spectral_radius"] < 1.0)


def synthesize_vertex_gains(problem: LmiProblem, eps: float = 1e-4, eps_sparsity: float = 1e-6,
                            h_max: int = 50, coupling: str = "auto", objective: str = "margin",
                            solver: str = "CLARABEL", polish: bool = True, **solver_opts) -> SynthesisCertificate:
    """Iterate the convexified subproblem from ``G_hat = I`` until ``G`` settles.

    Stops when ``||G_hat_p - G_p||_F < eps`` and
    ``max |R_p G_p^{-1} o Adj_p^c| < eps_sparsity`` for all p.  If ``G`` has
    settled but the sparsity test still fails, ``polish`` retries the
    current subproblem with ``G`` held at its last value.
    """
    if eps <= 0 or h_max < 1:
        raise ValueError("eps must be positive and h_max at least 1")
    P, nx = problem.P, problem.nx
    G_hat = np.repeat(np.eye(nx)[None], P, axis=0)
    history = []
    best = None
    for h in range(h_max):
        problem.G_hat = G_hat
        req = assemble_lmis(problem, coupling=coupling, objective=objective)
        wit = solve_feasibility(req, solver=solver, **solver_opts)
        if wit is None:
            raise SynthesisFailure("infeasible subproblem", h, history, best)
        K = wit.R @ np.linalg.inv(wit.G)
        off = 1 - problem.gain_masks
        dG = float(max(np.linalg.norm(G_hat[p] - wit.G[p]) for p in range(P)))
        sp = float(np.max(np.abs(K * off)))
        history.append({"h": h, "dG": dG, "sparsity": sp, "status": wit.status, "objective": wit.value})
        log.info("synthesis h=%d dG=%.3e sparsity=%.3e status=%s", h, dG, sp, wit.status)
        cert = SynthesisCertificate(K * problem.gain_masks, wit.S, wit.G, wit.R, problem.gain_masks,
                                    problem.vertices, problem.B, problem.C, problem.D, problem.nu,
                                    problem.delta, eps, h, list(history))
        best = cert if best is None or sp < best.history[-1]["sparsity"] else best
        if dG < eps and sp < eps_sparsity:
            cert.residuals = recheck(cert)
            return cert
        if dG < eps and polish:
            # G has settled but solver noise in G keeps R G^{-1} off the mask;
            # re-solve with G pinned so the sparsity holds exactly
            problem.G_hat = wit.G
            pol = solve_feasibility(assemble_lmis(problem, coupling=coupling, objective=objective, fix_G=True),
                                    solver=solver, **solver_opts)
            if pol is not None:
                Kp = pol.R @ np.linalg.inv(pol.G)
                sp_p = float(np.max(np.abs(Kp * off)))
                history.append({"h": h, "dG": 0.0, "sparsity": sp_p, "status": "polished:" + pol.status,
                                "objective": pol.value})
                log.info("synthesis h=%d polished sparsity=%.3e status=%s", h, sp_p, pol.status)
                if sp_p < eps_sparsity:
                    cert = SynthesisCertificate(Kp * problem.gain_masks, pol.S, pol.G, pol.R, problem.gain_masks,
                                                problem.vertices, problem.B, problem.C, problem.D, problem.nu,
                                                problem.delta, eps, h, list(history))
                    cert.residuals = recheck(cert)
                    return cert
        G_hat = wit.G
    raise SynthesisFailure("max iterations", h_max, history, best)


def polytopic_decay(cert: SynthesisCertificate, n_sequences: int = 100, horizon: int = 500,
                    threshold: float = 1e-6, rng=None) -> np.ndarray:
    """Steps needed for ``||dx||`` to fall below ``threshold`` under random simplex sequences.

    Each sequence draws a fresh Dirichlet theta every step and starts from a
    random unit vector.  Returns the step counts; ``horizon + 1`` marks a
    sequence that never got there.
    """
    rng = np.random.default_rng(rng)
    P, nx = cert.P, cert.vertices.shape[1]
    closed = cert.vertices - cert.B @ cert.gains
    steps = np.full(n_sequences, horizon + 1)
    for n in range(n_sequences):
        x = rng.standard_normal(nx)
        x /= np.linalg.norm(x)
        for t in range(horizon):
            theta = rng.dirichlet(np.ones(P))
            x = np.tensordot(theta, closed, axes=1) @ x
            if np.linalg.norm(x) < threshold:
                steps[n] = t + 1
                break
    return steps


def _arr(a):
    return np.asarray(a).tolist()


def save_certificate(path, cert: SynthesisCertificate, model: PolytopeModel | None = None) -> None:
    """JSON with one record per vertex plus the witnesses and residuals."""
    P = cert.P
    S = cert.S_param
    verts = []
    for p in range(P):
        rec = {"p": p, "s": p % S, "side": "lower" if p < S else "upper"}
        if model is not None:
            i, j = model.vertex_block(p)
            rec["block"] = [i, j]
        rec["gain"] = _arr(cert.gains[p])
        verts.append(rec)
    doc = {
        "nu": cert.nu, "delta": cert.delta, "eps": cert.eps, "h": cert.h,
        "residuals": cert.residuals, "history": cert.history,
        "B": _arr(cert.B), "C": _arr(cert.C), "D": _arr(cert.D),
        "vertices": verts,
        "vertex_matrices": _arr(cert.vertices), "gain_masks": _arr(cert.gain_masks),
        "S": _arr(cert.S), "G": _arr(cert.G), "R": _arr(cert.R),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_certificate(path) -> SynthesisCertificate:
    with open(path) as fh:
        doc = json.load(fh)
    gains = np.array([v["gain"] for v in sorted(doc["vertices"], key=lambda v: v["p"])], dtype=float)
    return SynthesisCertificate(
        gains=gains, S=np.array(doc["S"]), G=np.array(doc["G"]), R=np.array(doc["R"]),
        gain_masks=np.array(doc["gain_masks"]), vertices=np.array(doc["vertex_matrices"]),
        B=np.array(doc["B"]), C=np.array(doc["C"]), D=np.array(doc["D"]), nu=doc["nu"],
        delta=doc["delta"], eps=doc["eps"], h=doc["h"], history=doc["history"],
        residuals=doc["residuals"])
