"""Kernel functions and discretized convolution bases.

The movement process is a convolution of white noise with a basis function,
approximated by a sum over an equally spaced integration grid.  Three kernel
families are supported:

``brownian-indicator``
    ``h(t, tau) = 1{tau < t}``; the convolution is Brownian motion.
``gaussian``
    ``g(t, tau) = exp(-(w(t) - tau)**2 / range)``, evaluated directly.
``gaussian-integrated``
    ``h(t, tau) = sum_{tau < tau_k <= t_end} g(t, tau_k) * delta``, the
    Gaussian kernel integrated from ``tau`` to the end of the domain.  On a
    grid this equals ``H_gauss @ H_brown * delta`` exactly, i.e. Brownian
    motion smoothed by the Gaussian kernel.

Warps are applied to evaluation times only, never to integration nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .warp import WarpSpec, tdcf

__all__ = [
    "FAMILIES",
    "TimeGrid",
    "KernelSpec",
    "BasisMatrix",
    "eval_kernel",
    "integrated_basis",
    "build_basis",
    "DEFAULT_M_SINGLE",
    "DEFAULT_M_GROUP",
]

FAMILIES = ("brownian-indicator", "gaussian", "gaussian-integrated")
DEFAULT_M_SINGLE = 800
DEFAULT_M_GROUP = 260


@dataclass(frozen=True)
class TimeGrid:
    """Equally spaced integration nodes on ``[t_start, t_end]``."""

    t_start: float = 0.0
    t_end: float = 1.0
    m: int = DEFAULT_M_SINGLE
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"grid needs at least 2 nodes, got m={self.m}")
        if not self.t_end > self.t_start:
            raise ValueError("grid end must exceed grid start")
        nodes = np.linspace(self.t_start, self.t_end, self.m)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def delta(self) -> float:
        return (self.t_end - self.t_start) / (self.m - 1)


@dataclass(frozen=True)
class KernelSpec:
    family: str
    range: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.family != "brownian-indicator":
            if self.range is None or not self.range > 0:
                raise ValueError(f"{self.family} kernel needs a positive range, got {self.range}")


@dataclass(frozen=True)
class BasisMatrix:
    """Kernel evaluations ``values[i, j] = h(rows[i], cols[j])``."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    delta: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _warped(t, warp: WarpSpec | None) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return t if warp is None else np.asarray(tdcf(warp, t), dtype=float)


def _gauss(wt, tau, phi):
    d = wt - tau
    return np.exp(-(d * d) / phi)


def eval_kernel(spec: KernelSpec, t, tau, warp: WarpSpec | None = None):
    """Pointwise kernel ``g(t, tau)`` (or the indicator for the Brownian family).

    For ``gaussian-integrated`` this returns the underlying Gaussian ``g``;
    use :func:`integrated_basis` for the integrated basis function.
    """
    t = np.asarray(t, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if spec.family == "brownian-indicator":
        return (tau < t).astype(float)[()]
    return _gauss(_warped(t, warp), tau, spec.range)[()]


def integrated_basis(spec: KernelSpec, grid: TimeGrid, t, tau, warp: WarpSpec | None = None):
    """Riemann sum of ``g(t, .)`` over grid nodes in ``(tau, t_end]``."""
    if spec.family == "brownian-indicator":
        raise ValueError("integrated_basis requires a gaussian kernel family")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    nodes = grid.nodes
    g = _gauss(_warped(t, warp)[:, None], nodes[None, :], spec.range)
    # suffix[k] = sum of g over nodes with index > k
    suffix = np.concatenate([np.cumsum(g[:, ::-1], axis=1)[:, ::-1][:, 1:],
                             np.zeros((len(t), 1))], axis=1)
    # number of nodes <= tau; contributions come from nodes strictly above tau
    k = np.searchsorted(nodes, tau, side="right")
    out = np.zeros((len(t), len(tau)))
    inside = k > 0
    out[:, inside] = suffix[:, k[inside] - 1]
    # tau below the first node integrates over every node
    out[:, ~inside] = g.sum(axis=1, keepdims=True)
    out *= grid.delta
    return out.squeeze()[()] if out.size == 1 else out


def build_basis(spec: KernelSpec, obs_times, grid: TimeGrid,
                warp: WarpSpec | None = None) -> BasisMatrix:
    """Basis matrix with one row per time and one column per grid node."""
    t = np.asarray(obs_times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("build_basis needs a non-empty 1-D array of times")
    tol = 1e-12 * (grid.t_end - grid.t_start)
    if t.min() < grid.t_start - tol or t.max() > grid.t_end + tol:
        raise ValueError(f"times must lie in [{grid.t_start}, {grid.t_end}]")
    nodes = grid.nodes
    if spec.family == "brownian-indicator":
        values = (nodes[None, :] < t[:, None]).astype(float)
    elif spec.family == "gaussian":
        values = _gauss(_warped(t, warp)[:, None], nodes[None, :], spec.range)
    else:
        g = _gauss(_warped(t, warp)[:, None], nodes[None, :], spec.range)
        rev = np.cumsum(g[:, ::-1], axis=1)[:, ::-1]
        values = np.empty_like(g)
        values[:, :-1] = rev[:, 1:]
        values[:, -1] = 0.0
        values *= grid.delta
    return BasisMatrix(rows=t.copy(), cols=nodes, values=values, delta=grid.delta)
