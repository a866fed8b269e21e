"""End-to-end formation benchmark: bounds, synthesis, stabilization, distributed descent."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distopt import RunConfig, RunResult, expected_message_count, run, write_run_outputs
from .formation import FormationConfig, FormationDynamics, formation_dynamics
from .graph import Trajectory, rollout
from .linearization import EntryBounds, estimate_bounds, input_matrix, linearize_along, write_bounds_csv
from .manifest import write_manifest
from .polytope import PolytopeModel, build_polytope
from .projection import assembled_sparsity_violation, build_gain_tables, local_gain_schedule
from .synthesis import LmiProblem, SynthesisCertificate, save_certificate, synthesize_vertex_gains

log = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    # instance
    N: int = 6
    d: float = 4.0
    Ts: float = 1e-2
    c: float = 10.0
    T: int = 100
    perturbation: float = 0.5
    seed: int = 0
    q: float = 1.0
    r: float = 1e-2
    qf: float = 100.0
    settle_steps: int = 20000
    # bounds and synthesis
    n_samples: int = 10
    sample_scale: float = 0.5
    margin: float = 0.05
    nu: float = 0.05
    D_scale: float = 1e-5
    delta: float = 1e-6
    eps: float = 1e-4
    eps_sparsity: float = 1e-6
    h_max: int = 50
    coupling: str = "auto"
    mask_mode: str = "single"
    solver: str = "CLARABEL"
    # descent
    init_input_scale: float = 0.5
    beta: float = 0.01
    k_max: int = 500
    tol: float = 1e-6
    workers: int = 1

    def formation(self) -> FormationConfig:
        return FormationConfig(N=self.N, d=self.d, Ts=self.Ts, c=self.c, T=self.T, perturbation=self.perturbation,
                               seed=self.seed, q=self.q, r=self.r, qf=self.qf, nu=self.nu, D_scale=self.D_scale,
                               settle_steps=self.settle_steps)

    def run_config(self) -> RunConfig:
        return RunConfig(beta=self.beta, k_max=self.k_max, tol=self.tol, workers=self.workers)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BenchResult:
    dyn: FormationDynamics
    bounds: EntryBounds
    model: PolytopeModel
    cert: SynthesisCertificate
    nominal: Trajectory
    gains: np.ndarray             # (T, nu, nx) along the nominal trajectory
    stabilization: np.ndarray     # ||dx_t|| of the linearized closed loop
    result: RunResult
    error: np.ndarray             # (T+1, N, 2) final iterate minus x_des
    paths: dict


def sample_trajectories(dyn, n: int, scale: float, T: int, rng) -> list[Trajectory]:
    """Rollouts under i.i.d. Gaussian inputs, used to size the entry boxes."""
    return [rollout(dyn, scale * rng.standard_normal((T, dyn.graph.nu))) for _ in range(n)]


def stabilization_error(dyn, seq, K: np.ndarray, dx0: np.ndarray) -> np.ndarray:
    """``||dx_t||`` for ``dx+ = (A_t - B K_t) dx`` along a linearization sequence."""
    B = seq.B
    out = np.empty(seq.T + 1)
    dx = np.asarray(dx0, float)
    out[0] = np.linalg.norm(dx)
    for t in range(seq.T):
        dx = (seq.A[t] - B @ K[t]) @ dx
        out[t + 1] = np.linalg.norm(dx)
    return out


def write_gains_csv(path, graph, K: np.ndarray) -> None:
    """One row per (t, i, j, entry) over all agent pairs; non-neighbor blocks included."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "i", "j", "component", "k"])
        for t in range(K.shape[0]):
            for i in range(graph.N):
                for j in range(graph.N):
                    blk = K[t, graph.uslice(i), graph.xslice(j)]
                    for (r, c), val in np.ndenumerate(blk):
                        w.writerow([t, i, j, f"{r}{c}", repr(float(val))])


def write_error_csv(path, err: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "i", "component", "error"])
        for (t, i, c), val in np.ndenumerate(err):
            w.writerow([t, i, c, repr(float(val))])


def run_benchmark(cfg: BenchConfig, outdir, plots: bool = True) -> BenchResult:
    started = time.time()
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + 1)
    dyn = formation_dynamics(cfg.formation())
    g = dyn.graph

    samples = sample_trajectories(dyn, cfg.n_samples, cfg.sample_scale, cfg.T, rng)
    bounds = estimate_bounds(dyn, samples, cfg.margin)
    model = build_polytope(bounds, mask_mode=cfg.mask_mode)
    problem = LmiProblem.from_polytope(model, input_matrix(dyn), C=np.eye(g.nx), D=cfg.D_scale * np.eye(g.nx),
                                       nu=cfg.nu, delta=cfg.delta)
    log.info("synthesis: S=%d P=%d", model.S_param, model.P)
    cert = synthesize_vertex_gains(problem, eps=cfg.eps, eps_sparsity=cfg.eps_sparsity, h_max=cfg.h_max,
                                   coupling=cfg.coupling, solver=cfg.solver)
    tables = build_gain_tables(model, cert.gains)

    # stabilizing feedback along the open-loop trajectory
    nominal = rollout(dyn, np.zeros((cfg.T, g.nu)))
    seq = linearize_along(dyn, nominal)
    sched_warn: list = []
    K = local_gain_schedule(tables, seq, sched_warn)
    dx0 = rng.standard_normal(g.nx)
    stab = stabilization_error(dyn, seq, K, dx0 / np.linalg.norm(dx0))

    # distributed descent from a perturbed open-loop trajectory
    init = rollout(dyn, cfg.init_input_scale * rng.standard_normal((cfg.T, g.nu)))
    result = run(dyn, tables, cfg.run_config(), initial=init)
    X = np.array(result.final.x)                       # (N, T+1, 2)
    err = np.transpose(X - dyn.x_des[:, None, :], (1, 0, 2))

    paths = write_run_outputs(out, dyn, result)
    paths["gains"] = out / "gains.csv"
    paths["error"] = out / "error.csv"
    paths["stabilization"] = out / "stabilization.csv"
    paths["bounds"] = out / "bounds.csv"
    paths["certificate"] = out / "certificate.json"
    write_gains_csv(paths["gains"], g, K)
    write_error_csv(paths["error"], err)
    with open(paths["stabilization"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "error_norm"])
        for t, v in enumerate(stab):
            w.writerow([t, repr(float(v))])
    write_bounds_csv(paths["bounds"], bounds)
    save_certificate(paths["certificate"], cert, model)
    if plots:
        from . import plots as P
        paths["gains_png"] = P.plot_gains(paths["gains"], out / "gains.png", g.neighbors)
        paths["error_png"] = P.plot_error(paths["error"], out / "error.png")
        paths["cost_png"] = P.plot_cost(paths["cost"], out / "cost.png")
        paths["stabilization_png"] = P.plot_stabilization(paths["stabilization"], out / "stabilization.png")

    enorm = np.linalg.norm(err.reshape(err.shape[0], -1), axis=1)
    summary = {
        "S_param": model.S_param, "P": model.P, "synthesis_h": cert.h,
        "certificate": {k: v for k, v in cert.residuals.items() if k != "spectral_radii"},
        "run_status": result.status, "iterations": len(result.iterates) - 1,
        "cost_first": result.costs[0], "cost_last": result.costs[-1],
        "direction_norm_last": result.direction_norms[-1],
        "error_initial": float(enorm[0]), "error_final": float(enorm[-1]),
        "gain_sparsity_violation": assembled_sparsity_violation(g, K),
        "out_of_box_events": len(result.warnings), "schedule_out_of_box_events": len(sched_warn),
        "messages_per_phase_per_iteration": expected_message_count(g, cfg.T),
        "x0": np.array(dyn.x0), "x_des": dyn.x_des,
        "x_des_rule": "equilibrium of the unforced dynamics from x0",
        "nominal_trajectory": "zero-input rollout from x0",
        "initial_iterate": "rollout of init_input_scale * N(0, 1) inputs (seed + 1 stream)",
    }
    paths["manifest"] = write_manifest(out, "bench-formation", cfg, list(paths.values()), summary, started)
    return BenchResult(dyn, bounds, model, cert, nominal, K, stab, result, err, paths)
