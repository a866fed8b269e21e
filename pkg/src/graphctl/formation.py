"""Planar formation control on a cycle driven by virtual potentials."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import DynamicsOverGraph, GraphModel, QuadraticCost, rollout
from .models import register


@dataclass
class FormationConfig:
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
    nu: float = 0.05
    C: np.ndarray | None = None        # default identity
    D_scale: float = 1e-5              # D = D_scale * I
    settle_steps: int = 20000
    x0: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.d <= 0 or self.Ts <= 0:
            raise ValueError("d and Ts must be positive")
        if self.N < 3:
            raise ValueError("the cycle needs at least three agents")


def polygon(N: int, side: float, center=(0.0, 0.0)) -> np.ndarray:
    radius = side / (2 * np.sin(np.pi / N))
    ang = 2 * np.pi * np.arange(N) / N
    return np.column_stack([np.cos(ang), np.sin(ang)]) * radius + np.asarray(center)


def _dphi(e, d2):
    """Jacobian of (|e|^2 - d^2) e."""
    return (e @ e - d2) * np.eye(2) + 2.0 * np.outer(e, e)


class FormationDynamics(DynamicsOverGraph):
    """``x_i+ = x_i - Ts sum_{k=i+-1} (|x_i - x_k|^2 - d^2)(x_i - x_k) + Ts c u_i``."""

    def __init__(self, cfg: FormationConfig, x0=None, x_des=None):
        self.cfg = cfg
        N = cfg.N
        self.graph = GraphModel.cycle(N, n=2, m=2)
        if x0 is None:
            x0 = cfg.x0 if cfg.x0 is not None else initial_positions(cfg)
        self.x0 = tuple(np.asarray(v, float) for v in np.asarray(x0, float).reshape(N, 2))
        self._d2 = cfg.d ** 2
        self._b = cfg.Ts * cfg.c * np.eye(2)
        # positions of next/prev inside the sorted neighbor tuple
        self._pos = []
        for i in range(N):
            nb = self.graph.neighbors[i]
            self._pos.append((nb.index(i), nb.index((i + 1) % N), nb.index((i - 1) % N)))
        self.x_des = x_des
        ref = [np.zeros(2)] * N if x_des is None else list(np.asarray(x_des).reshape(N, 2))
        self.cost = QuadraticCost.identity(self.graph, cfg.q, cfg.r, cfg.qf, x_ref=ref)

    def f(self, i, xn, u):
        ii, nx_, pv = self._pos[i]
        xi = xn[ii]
        en = xi - xn[nx_]
        ep = xi - xn[pv]
        Ts = self.cfg.Ts
        return (xi - Ts * (en @ en - self._d2) * en - Ts * (ep @ ep - self._d2) * ep
                + self._b @ u)

    def dfdx(self, i, xn, u):
        ii, nx_, pv = self._pos[i]
        Ts = self.cfg.Ts
        Jn = _dphi(xn[ii] - xn[nx_], self._d2)
        Jp = _dphi(xn[ii] - xn[pv], self._d2)
        out = [np.zeros((2, 2)) for _ in xn]
        out[ii] = np.eye(2) - Ts * (Jn + Jp)
        out[nx_] = out[nx_] + Ts * Jn
        out[pv] = out[pv] + Ts * Jp
        return out

    def dfdu(self, i):
        return self._b.copy()


def initial_positions(cfg: FormationConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return polygon(cfg.N, cfg.d) + cfg.perturbation * rng.standard_normal((cfg.N, 2))


def settle(dyn: FormationDynamics, steps: int, tol: float = 1e-12) -> np.ndarray:
    """Equilibrium reached by the unforced dynamics from ``dyn.x0``."""
    x = [v.copy() for v in dyn.x0]
    zero = np.zeros(2)
    for _ in range(steps):
        nxt = dyn.step(x, [zero] * len(x))
        delta = max(np.max(np.abs(a - b)) for a, b in zip(nxt, x))
        x = nxt
        if delta < tol:
            break
    return np.array(x)


def formation_dynamics(cfg: FormationConfig | None = None, **kw) -> FormationDynamics:
    """Benchmark instance with the tracking reference set to the settled formation."""
    cfg = cfg or FormationConfig(**kw)
    base = FormationDynamics(cfg)
    x_des = settle(base, cfg.settle_steps)
    return FormationDynamics(cfg, x0=np.array(base.x0), x_des=x_des)


register("formation")(formation_dynamics)


def zero_input_rollout(dyn: FormationDynamics, T: int):
    return rollout(dyn, np.zeros((T, dyn.graph.nu)))
