"""Line charts for the report subcommand.

Figures are written with the Agg backend.  SVG output carries no creation
date and uses a fixed id salt, so identical inputs give identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["save_figure", "plot_warp_derivative", "plot_trajectory", "plot_degree",
           "plot_uncertainty"]


def save_figure(fig, path, fmt: str = "svg") -> str:
    path = f"{path}.{fmt}"
    with matplotlib.rc_context({"svg.hashsalt": "convmove", "svg.fonttype": "none"}):
        if fmt == "svg":
            fig.savefig(path, format="svg", metadata={"Date": None})
        elif fmt == "pdf":
            fig.savefig(path, format="pdf", metadata={"CreationDate": None, "ModDate": None})
        else:
            fig.savefig(path, format=fmt, dpi=120)
    plt.close(fig)
    return path


def plot_warp_derivative(t, averaged, lower, upper, per_model=None):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if per_model is not None:
        for curve in per_model:
            ax.plot(t, curve, color="0.8", lw=0.6)
    ax.fill_between(t, lower, upper, color="C0", alpha=0.25, lw=0)
    ax.plot(t, averaged, color="C0", lw=1.5, label="model averaged")
    ax.axhline(1.0, color="k", ls="--", lw=0.8, label="no deformation")
    ax.set_xlabel("time")
    ax.set_ylabel("dw/dt")
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def plot_trajectory(mean_xy, obs_xy=None, draws=None, labels=("x", "y")):
    fig, ax = plt.subplots(figsize=(5, 5))
    if draws is not None:
        for d in draws:
            ax.plot(d[:, 0], d[:, 1], color="0.75", lw=0.4)
    if obs_xy is not None:
        ax.plot(obs_xy[:, 0], obs_xy[:, 1], "o", ms=2, color="k", label="telemetry")
    ax.plot(mean_xy[:, 0], mean_xy[:, 1], color="C3", lw=1.5, label="posterior mean")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def plot_degree(curves: dict):
    """``curves`` maps individual id to ``(t, mean, lower, upper)``."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, (ident, (t, mean, lo, hi)) in enumerate(curves.items()):
        c = f"C{i % 10}"
        ax.fill_between(t, lo, hi, color=c, alpha=0.2, lw=0)
        ax.plot(t, mean, color=c, lw=1.2, label=str(ident))
    ax.set_xlabel("time")
    ax.set_ylabel("individual degree")
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return fig


def plot_uncertainty(curves: dict):
    """``curves`` maps individual id to ``(t, radius_joint, radius_independent)``."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, (ident, (t, rj, ri)) in enumerate(curves.items()):
        c = f"C{i % 10}"
        ax.plot(t, rj, color=c, lw=1.2, label=f"{ident} joint")
        if ri is not None and np.all(np.isfinite(ri)):
            ax.plot(t, ri, color=c, lw=1.0, ls="--", label=f"{ident} independent")
    ax.set_xlabel("time")
    ax.set_ylabel("95% credible radius")
    ax.legend(frameon=False, fontsize="small", ncol=2)
    fig.tight_layout()
    return fig
