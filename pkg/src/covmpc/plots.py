"""Static SVG output of run logs: trajectory overlays and cost curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import EmptyLog  # noqa: E402

# fixed ids and no timestamp so repeated runs give identical files
_SVG_RC = {"svg.hashsalt": "covmpc", "svg.fonttype": "none"}
_SVG_META = {"Date": None, "Creator": None}


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over full windows, length ``len(x) - window + 1``.

    The window is clamped to ``len(x)`` so short series still yield one point.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise EmptyLog("no samples to average")
    w = int(max(1, min(window, x.size)))
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[w:] - c[:-w]) / w


def _trajectories(log) -> np.ndarray:
    """Positions as ``(time, M, 2)``."""
    if log.positions is not None and len(log.steps):
        return np.asarray(log.positions)
    if log.plans:
        pos = np.stack([p.positions for p in log.plans], axis=1)
        return np.concatenate([pos, pos[:1]])  # close the periodic loop
    raise EmptyLog("log has no trajectories")


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_trajectories(log, path, arena=None) -> Path:
    pos = _trajectories(log)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        if arena is not None:
            v = np.vstack([arena.vertices, arena.vertices[:1]])
            ax.plot(v[:, 0], v[:, 1], color="0.3", lw=1)
        for i in range(pos.shape[1]):
            line = ax.plot(pos[:, i, 0], pos[:, i, 1], lw=1.2, marker="." if len(pos) == 1 else None, label=f"agent {i}")
            ax.plot(pos[0, i, 0], pos[0, i, 1], "o", color=line[0].get_color(), ms=4)
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.legend(loc="upper right", fontsize=7)
        return _save(fig, Path(path))


def plot_cost(log, path, window: int) -> Path:
    if len(log.steps):
        cost = log.coverage_costs
        xlabel = "time step"
    elif log.cost_trace:
        cost = np.asarray(log.cost_trace, dtype=float)
        xlabel = "iteration"
    else:
        raise EmptyLog("log has no cost samples")
    ma = moving_average(cost, window)
    w = len(cost) - len(ma) + 1
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(np.arange(len(cost)), cost, lw=1, marker="." if len(cost) == 1 else None, label="coverage cost")
        ax.plot(np.arange(w - 1, len(cost)), ma, lw=1.5, marker="." if len(ma) == 1 else None, label=f"moving average ({w})")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("cost")
        ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, Path(path))


def emit_plots(log, directory, window: int, arena=None) -> list:
    """Write ``trajectories.svg`` and ``cost.svg``; raises EmptyLog on an empty log."""
    if len(log) == 0:
        raise EmptyLog("nothing to plot")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return [plot_trajectories(log, d / "trajectories.svg", arena), plot_cost(log, d / "cost.svg", window)]
