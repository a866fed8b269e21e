"""Plain JSON run configurations; command-line flags mirror these keys."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class SynthesizeConfig:
    dynamics: str = "consensus"
    params: dict = field(default_factory=dict)
    T: int = 50
    n_samples: int = 10
    sample_scale: float = 0.5
    margin: float = 0.1
    fold_constant: bool = True
    nu: float = 0.05
    D_scale: float = 1e-5
    delta: float = 1e-6
    eps: float = 1e-4
    eps_sparsity: float = 1e-6
    h_max: int = 50
    coupling: str = "auto"
    mask_mode: str = "single"
    solver: str = "CLARABEL"
    seed: int = 0
    output: str = "synthesis_out"


@dataclass
class RunSettings:
    dynamics: str = "consensus"
    params: dict = field(default_factory=dict)
    N: int | None = None
    T: int = 50
    beta: float = 0.1
    k_max: int = 500
    tol: float = 1e-6
    step_mode: str = "constant"
    workers: int = 1
    certificate: str = "certificate.json"
    bounds: str = "bounds.csv"
    mask_mode: str = "single"
    init_input_scale: float = 0.0
    seed: int = 0
    output: str = "run_out"

    def dynamics_params(self) -> dict:
        p = dict(self.params)
        if self.N is not None:
            p.setdefault("N", self.N)
        return p


@dataclass
class ProjectConfig:
    dynamics: str = "consensus"
    params: dict = field(default_factory=dict)
    certificate: str = "certificate.json"
    bounds: str = "bounds.csv"
    curve: str = "curve.csv"
    iter: int | None = None
    zero_gains: bool = False
    mask_mode: str = "single"
    output: str = "project_out"


def load_config(cls, path=None, overrides: dict | None = None):
    """Defaults, then the JSON file, then explicit overrides (``None`` means unset)."""
    values = {}
    if path is not None:
        with open(Path(path)) as fh:
            values.update(json.load(fh))
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return cls(**values)
