"""Distributed nonlinear optimal control over graphs.

Offline: per-entry polytopic envelopes of the linearizations and LMI
synthesis of sparse vertex gains.  Online: local gain reconstruction, the
projection operator and a message-passing descent in which every agent
talks to its graph neighbors only.
"""
from .graph import (Curve, DivergenceError, DynamicsOverGraph, GraphModel, QuadraticCost, StructureError,
                    Trajectory, check_partials, rollout, total_cost, verify_trajectory)
from .linearization import (EntryBounds, LinearizationSequence, bounds_from_intervals, check_in_bounds,
                            estimate_bounds, input_matrix, linearize_along)
from .polytope import PolytopeModel, build_polytope, coefficients, reconstruct
from .synthesis import (LmiProblem, SynthesisCertificate, SynthesisFailure, assemble_lmis, load_certificate,
                        recheck, save_certificate, solve_feasibility, synthesize_vertex_gains)
from .projection import LocalGainTable, build_gain_tables, central_gains, local_gain, project
from .distopt import RoundTrace, RunConfig, RunResult, centralized_oracle, run
from .models import LinearGraphDynamics, consensus, make_dynamics, scalar_plant
from .formation import FormationConfig, FormationDynamics, formation_dynamics

__version__ = "0.1.0"
