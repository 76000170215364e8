"""Synthetic trajectories and telemetry with known parameters.

White noise on the integration grid has variance ``delta`` per node, so a
simulated path has covariance ``proc_var * delta * H H'``, the same matrix
the likelihood uses.  Replicates derive independent streams from one integer
seed through ``numpy.random.SeedSequence(seed).spawn``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, TimeGrid, build_basis
from .warp import WarpSpec

__all__ = [
    "SimScenario",
    "SimResult",
    "GroupScenario",
    "GroupResult",
    "spawn_seeds",
    "simulate_trajectory",
    "simulate_group",
    "regular_schedule",
]


def spawn_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent child seeds; child ``i`` depends only on ``(seed, i)``."""
    return np.random.SeedSequence(seed).spawn(n)


def regular_schedule(n: int, t_start: float = 0.0, t_end: float = 1.0,
                     gaps: list[tuple[float, float]] | None = None) -> np.ndarray:
    """``n`` equally spaced times with observations inside ``gaps`` removed."""
    t = np.linspace(t_start, t_end, n)
    for lo, hi in gaps or []:
        t = t[(t < lo) | (t > hi)]
    return t


@dataclass
class SimScenario:
    """Single-individual simulation settings (scaled units)."""

    times: np.ndarray
    meas_var: float
    proc_var: float
    range: float = 0.01
    family: str = "gaussian-integrated"
    warp: WarpSpec | None = None
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 1.0, 800))
    origin: tuple[float, float] = (0.0, 0.0)
    seed: int | np.random.SeedSequence = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(self.times < self.grid.t_start) or np.any(self.times > self.grid.t_end):
            raise ValueError("observation schedule outside the time domain")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.family, None if self.family == "brownian-indicator" else self.range)


@dataclass
class SimResult:
    grid_times: np.ndarray
    grid_path: np.ndarray   # (m, 2) latent path at the grid nodes
    times: np.ndarray
    truth: np.ndarray       # (n, 2) latent path at observation times
    obs: np.ndarray         # (n, 2) noisy observations
    seed: object = None


def _rng(seed):
    return np.random.default_rng(seed)


def simulate_trajectory(scenario: SimScenario, n_replicates: int | None = None):
    """Latent path and noisy observations for one individual.

    With ``n_replicates`` set, returns the stacked latent paths at the
    observation times, shape ``(n_replicates, n, 2)``, which is what the
    Monte-Carlo covariance checks need.
    """
    rng = _rng(scenario.seed)
    grid = scenario.grid
    kernel = scenario.kernel
    H_obs = build_basis(kernel, scenario.times, grid, scenario.warp).values
    sd_noise = math.sqrt(scenario.proc_var * grid.delta)
    origin = np.asarray(scenario.origin, dtype=float)
    if n_replicates is not None:
        eps = rng.standard_normal((n_replicates, grid.m, 2))
        return origin + sd_noise * np.einsum("nm,rmc->rnc", H_obs, eps)
    H_grid = build_basis(kernel, grid.nodes, grid, scenario.warp).values
    eps = rng.standard_normal((grid.m, 2))
    truth = origin + sd_noise * H_obs @ eps
    grid_path = origin + sd_noise * H_grid @ eps
    obs = truth + math.sqrt(scenario.meas_var) * rng.standard_normal(truth.shape)
    return SimResult(grid.nodes.copy(), grid_path, scenario.times.copy(), truth, obs,
                     seed=scenario.seed)


@dataclass
class GroupScenario:
    """Group simulation with fixed latent network positions.

    ``z`` has shape ``(J, m_w, 2)`` on ``latent_grid``; ``times`` is a list of
    per-individual observation schedules.
    """

    times: list
    z: np.ndarray
    meas_var: float
    proc_var: float
    range: float = 0.01
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 1.0, 260))
    latent_grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 1.0, 15))
    phi_z: float = 0.08
    origin: np.ndarray | None = None
    seed: int | np.random.SeedSequence = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.times = [np.asarray(t, dtype=float) for t in self.times]
        J = self.z.shape[0]
        if len(self.times) != J:
            raise ValueError("one observation schedule per individual required")
        if self.origin is None:
            self.origin = np.zeros((J, 2))
        self.origin = np.asarray(self.origin, dtype=float).reshape(J, 2)

    @property
    def J(self) -> int:
        return self.z.shape[0]


@dataclass
class GroupResult:
    times: list
    truth: list
    obs: list
    grid_times: np.ndarray
    grid_paths: np.ndarray  # (J, m, 2)
    seed: object = None


def simulate_group(scenario: GroupScenario) -> GroupResult:
    """Nested-convolution paths: Brownian noise, Gaussian smoothing, network mixing.

    Each path is ``origin_j + sum_k W_jk(t) * (smoothed noise of k)(t)``
    where ``W`` is the row-normalized network weight matrix at time ``t``.
    """
    from .network import mixing_at_times  # local import: network depends on gp/kernels only

    rng = _rng(scenario.seed)
    grid = scenario.grid
    kernel = KernelSpec("gaussian-integrated", scenario.range)
    J = scenario.J
    eps = rng.standard_normal((J, grid.m, 2))
    sd_noise = math.sqrt(scenario.proc_var * grid.delta)

    def paths_at(t):
        H = build_basis(kernel, t, grid).values          # (n, m)
        own = np.einsum("nm,kmc->knc", H, eps)           # (J, n, 2)
        W = mixing_at_times(scenario.z, scenario.latent_grid, scenario.phi_z, t)  # (n, J, J)
        mixed = np.einsum("njk,knc->jnc", W, own)
        return scenario.origin[:, None, :] + sd_noise * mixed

    grid_paths = paths_at(grid.nodes)
    truth, obs = [], []
    for j, t in enumerate(scenario.times):
        tr = paths_at(t)[j]
        truth.append(tr)
        obs.append(tr + math.sqrt(scenario.meas_var) * rng.standard_normal(tr.shape))
    return GroupResult([t.copy() for t in scenario.times], truth, obs,
                       grid.nodes.copy(), grid_paths, seed=scenario.seed)
