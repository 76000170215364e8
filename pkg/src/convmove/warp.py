"""Temporally deforming cumulative functions (TDCF).

A TDCF warps time through a mixture of the identity map and the cumulative
distribution of a truncated Gaussian density::

    w(t) = (magnitude * F(t) + t - t_start) / (magnitude + t_end - t_start)

Because ``F`` is non-decreasing and the identity term has slope one, the warp
is strictly increasing (it never folds) and maps the domain onto [0, 1].
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = [
    "WarpSpec",
    "truncated_gaussian_density",
    "truncated_gaussian_cdf",
    "tdcf",
    "tdcf_derivative",
    "enumerate_warp_candidates",
    "DEFAULT_WARP_SCALES",
    "DEFAULT_WARP_MAGNITUDES",
]

DEFAULT_WARP_SCALES = tuple(np.linspace(0.01, 0.0625, 10))
DEFAULT_WARP_MAGNITUDES = tuple(np.linspace(0.6, 0.8, 10))

# absolute slack when checking that a time lies in the domain
_DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class WarpSpec:
    """One warping function.

    Parameters
    ----------
    center : float
        Location of the truncated Gaussian density.
    scale : float
        Squared-time scale of the density, ``f(t) ~ exp(-(t - center)**2 / scale)``.
        ``math.inf`` gives the uniform density.
    magnitude : float
        Warp magnitude (non-negative). Zero gives the identity warp.
    t_start, t_end : float
        Time domain; the density is truncated to it.
    """

    center: float
    scale: float
    magnitude: float
    t_start: float = 0.0
    t_end: float = 1.0

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError(f"empty warp domain ({self.t_start}, {self.t_end})")
        if not self.scale > 0:
            raise ValueError(f"warp scale must be positive, got {self.scale}")
        if not self.magnitude >= 0:
            raise ValueError(f"warp magnitude must be >= 0, got {self.magnitude}")
        if not self.t_start <= self.center <= self.t_end:
            raise ValueError(f"warp center {self.center} outside domain")

    @property
    def span(self) -> float:
        return self.t_end - self.t_start

    @property
    def is_identity(self) -> bool:
        return self.magnitude == 0 or math.isinf(self.scale)

    def label(self) -> str:
        return f"c{self.center:.6g}_s{self.scale:.6g}_m{self.magnitude:.6g}"

    def to_dict(self) -> dict:
        return {
            "center": self.center,
            "scale": self.scale,
            "magnitude": self.magnitude,
            "t_start": self.t_start,
            "t_end": self.t_end,
        }


def _check_domain(spec: WarpSpec, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < spec.t_start - _DOMAIN_TOL) or np.any(t > spec.t_end + _DOMAIN_TOL):
        raise ValueError(
            f"time outside warp domain [{spec.t_start}, {spec.t_end}]"
        )
    return np.clip(t, spec.t_start, spec.t_end)


def _sd(spec: WarpSpec) -> float:
    # exp(-(t-c)^2/scale) is a Gaussian with variance scale/2
    return math.sqrt(spec.scale / 2.0)


def _window_mass(spec: WarpSpec) -> tuple[float, float]:
    sd = _sd(spec)
    lo = float(ndtr((spec.t_start - spec.center) / sd))
    hi = float(ndtr((spec.t_end - spec.center) / sd))
    return lo, hi - lo


def truncated_gaussian_density(spec: WarpSpec, t):
    """Density ``f(t)`` of the warp, normalized over ``(t_start, t_end)``."""
    t = _check_domain(spec, t)
    if math.isinf(spec.scale):
        return np.full_like(t, 1.0 / spec.span)[()]
    sd = _sd(spec)
    _, mass = _window_mass(spec)
    z = (t - spec.center) / sd
    dens = np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi) * mass)
    return dens[()]


def truncated_gaussian_cdf(spec: WarpSpec, t):
    """Cumulative ``F(t)`` of the truncated density, closed form."""
    t = _check_domain(spec, t)
    if math.isinf(spec.scale):
        return ((t - spec.t_start) / spec.span)[()]
    lo, mass = _window_mass(spec)
    cdf = (ndtr((t - spec.center) / _sd(spec)) - lo) / mass
    return np.clip(cdf, 0.0, 1.0)[()]


def tdcf(spec: WarpSpec | None, t):
    """Warped time ``w(t)``; ``None`` means no warp (identity on the unit domain)."""
    if spec is None:
        return np.asarray(t, dtype=float)[()]
    t = _check_domain(spec, t)
    if spec.magnitude == 0:
        return ((t - spec.t_start) / spec.span)[()]
    F = truncated_gaussian_cdf(spec, t)
    # grouping (t - t_start) makes w(t_end) == 1 exactly
    return ((spec.magnitude * F + (t - spec.t_start)) / (spec.magnitude + spec.span))[()]


def tdcf_derivative(spec: WarpSpec | None, t):
    """Derivative ``dw/dt = (magnitude * f(t) + 1) / (magnitude + span)``."""
    if spec is None:
        return np.ones_like(np.asarray(t, dtype=float))[()]
    t = _check_domain(spec, t)
    f = truncated_gaussian_density(spec, t)
    return ((spec.magnitude * f + 1.0) / (spec.magnitude + spec.span))[()]


def enumerate_warp_candidates(
    n_centers: int,
    scales=DEFAULT_WARP_SCALES,
    magnitudes=DEFAULT_WARP_MAGNITUDES,
    domain: tuple[float, float] = (0.0, 1.0),
) -> list[WarpSpec]:
    """Cartesian product of equally spaced centers with scales and magnitudes.

    Centers sit at ``t_start + k * span / (n_centers + 1)`` for
    ``k = 1..n_centers``, i.e. strictly inside the domain with uniform spacing.
    """
    scales = list(scales)
    magnitudes = list(magnitudes)
    if n_centers < 1 or not scales or not magnitudes:
        raise ValueError("warp candidate grid needs at least one center, scale and magnitude")
    t0, t1 = domain
    centers = t0 + (t1 - t0) * np.arange(1, n_centers + 1) / (n_centers + 1)
    return [
        WarpSpec(float(c), float(s), float(m), t0, t1)
        for c, s, m in itertools.product(centers, scales, magnitudes)
    ]
