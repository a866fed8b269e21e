"""Command line entry point.

Every subcommand accepts ``--config file.json``; any flag given on the
command line overrides the file, which overrides the defaults.  Each run
writes ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bench import BenchConfig, run_benchmark, sample_trajectories
from .config import ProjectConfig, RunSettings, SynthesizeConfig, load_config
from .distopt import RunConfig, expected_message_count, run, write_run_outputs
from .graph import rollout, read_iterates_csv, verify_trajectory, write_iterates_csv
from .linearization import estimate_bounds, input_matrix, linearize_along, read_bounds_csv, write_bounds_csv
from .manifest import write_manifest
from .models import make_dynamics
from .polytope import build_polytope
from .projection import build_gain_tables, local_gain_schedule, project
from .synthesis import (LmiProblem, SynthesisFailure, certificate_ok, load_certificate, recheck, save_certificate,
                        synthesize_vertex_gains)

log = logging.getLogger("graphctl")


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


_TYPES = {"int": int, "float": float, "str": str, "bool": _bool, "dict": json.loads,
          "int | None": int, "float | None": float}


def _add_fields(parser: argparse.ArgumentParser, cls) -> None:
    for f in dataclasses.fields(cls):
        conv = _TYPES.get(str(f.type), str)
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None,
                            help=f"(config key {f.name!r})")


def _overrides(args, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)}


def _gain_tables(dyn, cert_path, bounds_path, mask_mode):
    cert = load_certificate(cert_path)
    bounds = read_bounds_csv(bounds_path, dyn.graph)
    model = build_polytope(bounds, mask_mode=mask_mode)
    if model.vertices.shape != cert.vertices.shape or not np.allclose(model.vertices, cert.vertices):
        raise ValueError("certificate and bounds describe different polytopes")
    return cert, model, build_gain_tables(model, cert.gains)


def cmd_synthesize(args) -> int:
    started = time.time()
    cfg = load_config(SynthesizeConfig, args.config, _overrides(args, SynthesizeConfig))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dyn = make_dynamics(cfg.dynamics, **cfg.params)
    rng = np.random.default_rng(cfg.seed)
    samples = sample_trajectories(dyn, cfg.n_samples, cfg.sample_scale, cfg.T, rng)
    bounds = estimate_bounds(dyn, samples, cfg.margin, fold_constant=cfg.fold_constant)
    if bounds.S_param == 0:
        print("no varying entries: use --fold-constant false with a positive margin", file=sys.stderr)
        return 2
    model = build_polytope(bounds, mask_mode=cfg.mask_mode)
    g = dyn.graph
    problem = LmiProblem.from_polytope(model, input_matrix(dyn), C=np.eye(g.nx), D=cfg.D_scale * np.eye(g.nx),
                                       nu=cfg.nu, delta=cfg.delta)
    paths = [out / "bounds.csv"]
    write_bounds_csv(paths[0], bounds)
    try:
        cert = synthesize_vertex_gains(problem, eps=cfg.eps, eps_sparsity=cfg.eps_sparsity, h_max=cfg.h_max,
                                       coupling=cfg.coupling, solver=cfg.solver)
    except SynthesisFailure as exc:
        write_manifest(out, "synthesize", cfg, paths, {"status": "failed", "reason": exc.reason, "h": exc.h,
                                                         "history": exc.history}, started)
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return 1
    paths.append(out / "certificate.json")
    save_certificate(paths[-1], cert, model)
    res = {k: v for k, v in cert.residuals.items() if k != "spectral_radii"}
    write_manifest(out, "synthesize", cfg, paths,
                   {"status": "ok", "S_param": model.S_param, "P": model.P, "h": cert.h, "residuals": res}, started)
    print(json.dumps({"h": cert.h, **res}, indent=2))
    return 0


def cmd_run(args) -> int:
    started = time.time()
    cfg = load_config(RunSettings, args.config, _overrides(args, RunSettings))
    dyn = make_dynamics(cfg.dynamics, **cfg.dynamics_params())
    cert, model, tables = _gain_tables(dyn, cfg.certificate, cfg.bounds, cfg.mask_mode)
    rng = np.random.default_rng(cfg.seed)
    init = rollout(dyn, cfg.init_input_scale * rng.standard_normal((cfg.T, dyn.graph.nu)))
    rc = RunConfig(beta=cfg.beta, k_max=cfg.k_max, tol=cfg.tol, step_mode=cfg.step_mode, workers=cfg.workers)
    result = run(dyn, tables, rc, initial=init)
    paths = write_run_outputs(cfg.output, dyn, result)
    from .plots import plot_cost
    paths["cost_png"] = plot_cost(paths["cost"], Path(cfg.output) / "cost.png")
    summary = {
        "status": result.status, "error": result.error, "iterations": len(result.iterates) - 1,
        "cost_first": result.costs[0], "cost_last": result.costs[-1],
        "direction_norm_last": result.direction_norms[-1] if result.direction_norms else None,
        "max_defect": max(verify_trajectory(dyn, c).max_defect for c in result.iterates),
        "non_edge_accesses": len(result.trace.non_edge_accesses(dyn.graph)),
        "messages_per_phase_per_iteration": expected_message_count(dyn.graph, cfg.T),
        "out_of_box_events": len(result.warnings),
        "tolerances": {"feasibility": 1e-10, "stop": cfg.tol},
    }
    write_manifest(cfg.output, "run", cfg, list(paths.values()), summary, started)
    print(json.dumps({k: summary[k] for k in ("status", "iterations", "cost_first", "cost_last")}, default=str))
    return 0 if result.status != "diverged" else 1


def cmd_project(args) -> int:
    started = time.time()
    cfg = load_config(ProjectConfig, args.config, _overrides(args, ProjectConfig))
    dyn = make_dynamics(cfg.dynamics, **cfg.params)
    g = dyn.graph
    curves = read_iterates_csv(cfg.curve, g)
    k = max(curves) if cfg.iter is None else cfg.iter
    curve = curves[k]
    if cfg.zero_gains:
        K = np.zeros((curve.T, g.nu, g.nx))
    else:
        _, _, tables = _gain_tables(dyn, cfg.certificate, cfg.bounds, cfg.mask_mode)
        K = local_gain_schedule(tables, linearize_along(dyn, curve))
    traj = project(dyn, K, curve)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    write_iterates_csv(path, [traj], [k])
    rep = verify_trajectory(dyn, traj)
    write_manifest(out, "project", cfg, [path], {"iter": k, "max_defect": rep.max_defect,
                                                 "feasible": rep.feasible}, started)
    print(json.dumps({"iter": k, "max_defect": rep.max_defect, "feasible": rep.feasible}))
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(BenchConfig, args.config, _overrides(args, BenchConfig))
    res = run_benchmark(cfg, args.output, plots=not args.no_plots)
    with open(res.paths["manifest"]) as fh:
        summary = json.load(fh)["results"]
    keys = ("S_param", "P", "synthesis_h", "run_status", "iterations", "cost_first", "cost_last",
            "error_initial", "error_final", "gain_sparsity_violation")
    print(json.dumps({k: summary[k] for k in keys}, indent=2))
    return 0


def cmd_verify(args) -> int:
    cert = load_certificate(args.certificate)
    res = recheck(cert)
    ok = certificate_ok(res, args.lmi_tol, args.sparsity_tol)
    report = {"ok": ok, **{k: v for k, v in res.items() if k != "spectral_radii"},
              "lmi_tol": args.lmi_tol, "sparsity_tol": args.sparsity_tol}
    if args.output:
        write_manifest(args.output, "verify-certificate", vars(args), [], report)
    print(json.dumps(report, indent=2))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="estimate entry bounds and synthesize sparse vertex gains")
    s.add_argument("--config")
    _add_fields(s, SynthesizeConfig)
    s.set_defaults(func=cmd_synthesize)

    r = sub.add_parser("run", help="distributed descent from a certificate and bounds file")
    r.add_argument("--config")
    _add_fields(r, RunSettings)
    r.set_defaults(func=cmd_run)

    j = sub.add_parser("project", help="project one curve onto a trajectory")
    j.add_argument("--config")
    _add_fields(j, ProjectConfig)
    j.set_defaults(func=cmd_project)

    b = sub.add_parser("bench-formation", help="formation benchmark end to end")
    b.add_argument("--config")
    b.add_argument("--output", default="bench_out")
    b.add_argument("--no-plots", action="store_true")
    _add_fields(b, BenchConfig)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify-certificate", help="recheck LMI, sparsity and spectral conditions")
    v.add_argument("certificate")
    v.add_argument("--lmi-tol", type=float, default=1e-8)
    v.add_argument("--sparsity-tol", type=float, default=1e-6)
    v.add_argument("--output")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
