"""Figure rendering for experiment reports.

Every report writes delimited data first; these helpers render the matching
figures (sweep curves, tank trajectories, grid policy/risk maps) to image
files next to the CSVs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .gridworld import ACTION_NAMES, GridSpec
from .mdp import StateClass

__all__ = [
    "plot_sweep",
    "plot_tank_runs",
    "plot_grid_policy",
    "plot_open_loop_controls",
    "plot_weighted_difference",
]

_DPI = 150


def _save(fig, path, config_hash: str | None):
    meta = {"Software": "riskq"}
    if config_hash:
        meta["Comment"] = f"config={config_hash}"
    fig.savefig(path, dpi=_DPI, metadata=meta)
    plt.close(fig)


def plot_sweep(records, path, omega: float | None = None,
               config_hash: str | None = None) -> None:
    """Risk, value, and weighted criterion against the trade-off weight."""
    xi = [r.xi for r in records]
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    ax1.plot(xi, [r.risk for r in records], "o-", color="tab:red", ms=3, label="risk")
    if omega is not None:
        ax1.axhline(omega, color="tab:red", ls=":", lw=1, label="risk bound")
    ax1.set_xlabel(r"weight $\xi$")
    ax1.set_ylabel("risk estimate", color="tab:red")
    ax1.tick_params(axis="y", labelcolor="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(xi, [r.value for r in records], "s-", color="tab:blue", ms=3, label="value")
    ax2.plot(xi, [r.weighted for r in records], "^--", color="tab:green", ms=3,
             label="weighted criterion")
    ax2.set_ylabel("value / weighted", color="tab:blue")
    ax2.tick_params(axis="y", labelcolor="tab:blue")
    h1, l1 = ax1.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax1.legend(h1 + h2, l1 + l2, loc="center right", fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)


def plot_tank_runs(run_logs, params, path, show_concentration: bool = False,
                   config_hash: str | None = None) -> None:
    """Level (and optionally concentration) trajectories for example runs."""
    ncols = 2 if show_concentration else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4), squeeze=False)
    ax = axes[0, 0]
    for rows in run_logs:
        ts = [r[0] for r in rows] + [rows[-1][0] + 1]
        ys = [r[3] for r in rows]
        last = rows[-1]
        y_end = last[3] + params.area_dt * (last[1] - last[2])
        ax.plot(ts, ys + [y_end], "-o", ms=2, alpha=0.7)
    ax.axhline(params.y_min, color="k", ls="--", lw=1)
    ax.axhline(params.y_max, color="k", ls="--", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("tank level")
    if show_concentration:
        axc = axes[0, 1]
        for rows in run_logs:
            axc.plot([r[0] for r in rows], [r[4] for r in rows], "-o", ms=2, alpha=0.7)
        axc.axhline(0.1, color="k", ls="--", lw=1)
        axc.axhline(0.4, color="k", ls="--", lw=1)
        axc.set_xlabel("step")
        axc.set_ylabel("concentration 1")
    fig.tight_layout()
    _save(fig, path, config_hash)


def plot_grid_policy(spec: GridSpec, policy, risks: dict, path,
                     omega: float | None = None, title: str = "",
                     config_hash: str | None = None) -> None:
    """Arrow map over the grid with a per-cell risk heat map."""
    w, h = spec.width, spec.height
    grid = np.zeros((h, w))
    for (x, y), rho in risks.items():
        grid[y - 1, x - 1] = rho
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(grid, origin="lower", cmap="Reds", vmin=0.0, vmax=1.0,
                   extent=(0.5, w + 0.5, 0.5, h + 0.5))
    arrow = {0: (0.3, 0), 1: (-0.3, 0), 2: (0, 0.3), 3: (0, -0.3)}
    index = {c: i for i, c in enumerate(spec.cells())}
    for cell in spec.cells():
        x, y = cell
        cls = spec.cell_class(cell)
        if cls is StateClass.ERROR:
            ax.text(x, y, "E", ha="center", va="center", fontsize=11, weight="bold")
            continue
        if cls is StateClass.GOAL:
            ax.text(x, y, "G", ha="center", va="center", fontsize=11, weight="bold",
                    color="tab:green")
            continue
        dx, dy = arrow[policy.action(index[cell])]
        ax.annotate("", xy=(x + dx, y + dy), xytext=(x - dx, y - dy),
                    arrowprops=dict(arrowstyle="->", lw=1.3))
        if omega is not None and risks.get(cell, 0.0) > omega:
            ax.plot(x, y, "s", mfc="none", mec="tab:blue", ms=26, mew=1.6)
    ax.set_xticks(range(1, w + 1))
    ax.set_yticks(range(1, h + 1))
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="risk")
    fig.tight_layout()
    _save(fig, path, config_hash)


def plot_open_loop_controls(flows, params, path, config_hash: str | None = None) -> None:
    """Fixed open-loop outflow sequence as a step plot."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.step(range(len(flows)), flows, where="post", lw=2)
    ax.axhline(params.f_spec, color="k", ls=":", lw=1, label="set point")
    ax.set_xlabel("step")
    ax.set_ylabel("outflow")
    ax.set_ylim(params.f_min - 0.02, params.f_max + 0.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)


def plot_weighted_difference(xi, diff, path, config_hash: str | None = None) -> None:
    """Difference of weighted criteria between two sweeps (history study)."""
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    ax.plot(xi, diff, "o-", ms=3)
    ax.axhline(0.0, color="k", lw=1)
    ax.set_xlabel(r"weight $\xi$")
    ax.set_ylabel("weighted criterion difference")
    fig.tight_layout()
    _save(fig, path, config_hash)
