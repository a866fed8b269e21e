"""Figures rendered from the benchmark CSV files (Agg backend, files only)."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_gains(gains_csv, out_png, neighbors) -> Path:
    """Gain entries over time, neighbor blocks vs the (zero) non-neighbor blocks."""
    series = defaultdict(list)
    for r in _rows(gains_csv):
        series[(int(r["i"]), int(r["j"]), r["component"])].append((int(r["t"]), float(r["k"])))
    fig, ax = plt.subplots(figsize=(7, 4))
    for (i, j, comp), pts in sorted(series.items()):
        t, k = np.array(pts).T
        inside = j in neighbors[i]
        ax.plot(t, k, lw=0.8 if inside else 0.0, marker=None if inside else ".", ms=2,
                color="tab:blue" if inside else "tab:red", alpha=0.6 if inside else 0.3)
    ax.plot([], [], color="tab:blue", label="j in N_i")
    ax.plot([], [], ".", color="tab:red", label="j not in N_i")
    ax.set_xlabel("t")
    ax.set_ylabel("k_t(i,j) entries")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_error(error_csv, out_png) -> Path:
    """Per-agent error components and the overall norm against t."""
    series = defaultdict(list)
    for r in _rows(error_csv):
        series[(int(r["i"]), int(r["component"]))].append((int(r["t"]), float(r["error"])))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    sq = defaultdict(float)
    for (i, c), pts in sorted(series.items()):
        t, e = np.array(pts).T
        a1.plot(t, e, lw=0.9, label=f"agent {i}, comp {c}")
        for tt, ee in pts:
            sq[tt] += ee * ee
    ts = sorted(sq)
    a2.semilogy(ts, [max(np.sqrt(sq[t]), 1e-300) for t in ts])
    a1.set_xlabel("t")
    a1.set_ylabel("x - x_des")
    a2.set_xlabel("t")
    a2.set_ylabel("||x_t - x_des||")
    if len(series) <= 12:
        a1.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_cost(cost_csv, out_png) -> Path:
    rows = _rows(cost_csv)
    k = [int(r["iter"]) for r in rows]
    c = [float(r["cost"]) for r in rows]
    d = [float(r["direction_norm"]) if r["direction_norm"] else np.nan for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(k, c)
    a1.set_xlabel("iteration")
    a1.set_ylabel("cost")
    a2.semilogy(k, d)
    a2.set_xlabel("iteration")
    a2.set_ylabel("||(z, v)||_inf")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_stabilization(stab_csv, out_png) -> Path:
    rows = _rows(stab_csv)
    t = [int(r["t"]) for r in rows]
    e = [max(float(r["error_norm"]), 1e-300) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, e)
    ax.set_xlabel("t")
    ax.set_ylabel("||dx_t||")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
