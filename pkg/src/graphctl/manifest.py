"""Run manifests: every command records its parameters, tolerances and outputs."""
from __future__ import annotations

import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_manifest(outdir, command: str, params, outputs=None, results=None, started: float | None = None) -> Path:
    """Write ``manifest.json`` into ``outdir`` and return its path."""
    import cvxpy
    import scipy
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "parameters": _plain(params),
        "outputs": sorted(str(Path(p).name) for p in (outputs or [])),
        "results": _plain(results or {}),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "cvxpy": cvxpy.__version__},
        "argv": sys.argv,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if started is not None:
        doc["elapsed_s"] = time.time() - started
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=str)
    return path
