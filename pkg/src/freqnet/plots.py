"""Static SVG figures of a trace (frequency, dispatch, tie and line flows, storages)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_trace", "FIGURES"]

FIGURES = ("frequency", "dispatch", "tie_flow", "line_flow", "storage")


def _label(name: str, prefix: str, suffix: str = "") -> str:
    core = name[len(prefix):len(name) - len(suffix) if suffix else None]
    return core.replace("_", "-")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_trace(table, out_dir: str | os.PathLike, stem: str = "trace") -> list[str]:
    """Write one SVG per entry of :data:`FIGURES`; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    t = table["t"]
    paths = []

    def new(title, ylabel):
        fig, ax = plt.subplots(figsize=(7.0, 3.6))
        ax.set_title(title)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        return fig, ax

    fig, ax = new("Frequency deviations", "omega [pu]")
    for name, col in table.matching("omega_").items():
        ax.plot(t, col, lw=0.8, label=_label(name, "omega_b"))
    ax.legend(ncol=7, fontsize=6, title="bus", title_fontsize=7)
    paths.append(os.path.join(out_dir, f"{stem}_frequency.svg"))
    _save(fig, paths[-1])

    fig, ax = new("Dispatch", "u [MW]")
    for name, col in table.matching("u_", "_mw").items():
        ax.plot(t, col, lw=1.0, label=_label(name, "u_", "_mw"))
    ax.legend(fontsize=7, title="unit_bus", title_fontsize=7)
    paths.append(os.path.join(out_dir, f"{stem}_dispatch.svg"))
    _save(fig, paths[-1])

    fig, ax = new("Tie-line exchange", "flow [MW]")
    for name, col in table.matching("tie_", "_mw").items():
        ax.plot(t, col, lw=1.0, label=_label(name, "tie_", "_mw"))
    if len(table.matching("tie_", "_mw")):
        ax.legend(fontsize=7, title="areas", title_fontsize=7)
    paths.append(os.path.join(out_dir, f"{stem}_tie_flow.svg"))
    _save(fig, paths[-1])

    fig, ax = new("Monitored line flows", "flow [MW]")
    for name, col in table.matching("flow_", "_mw").items():
        ax.plot(t, col, lw=1.0, label=_label(name, "flow_", "_mw"))
    if len(table.matching("flow_", "_mw")):
        ax.legend(fontsize=7, title="line", title_fontsize=7)
    paths.append(os.path.join(out_dir, f"{stem}_line_flow.svg"))
    _save(fig, paths[-1])

    fig, ax = new("Storage functions", "storage [pu]")
    for name in ("S_p", "S_o", "S_ch"):
        col = np.maximum(table[name], 1e-30)
        ax.semilogy(t, col, lw=1.0, label=name)
    ax.legend(fontsize=7)
    paths.append(os.path.join(out_dir, f"{stem}_storage.svg"))
    _save(fig, paths[-1])
    return paths
