"""Convolution-induced Gaussian process: covariance, likelihood, prediction.

Both position coordinates share the same basis and parameters and are
independent given them, so every computation runs per coordinate on an
``n x m`` basis ``H``.  The marginal covariance of one coordinate is::

    Sigma = meas_var * I + proc_var * delta * H H'

and is never formed in the likelihood: the Woodbury identity and the
determinant lemma reduce every solve to an ``m x m`` Cholesky factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import BasisMatrix

__all__ = [
    "NumericalFailure",
    "MovementParams",
    "TrajectoryDraws",
    "process_covariance",
    "marginal_loglik",
    "dense_loglik",
    "lowrank_loglik",
    "predict_trajectory",
    "conditional_moments",
    "path_summaries",
    "credible_circle_radius",
]

LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-10


class NumericalFailure(ArithmeticError):
    """A factorization or likelihood evaluation produced a non-finite result."""

    def __init__(self, message: str, params: dict | None = None):
        self.params = dict(params or {})
        if self.params:
            message = f"{message} (params: {self.params})"
        super().__init__(message)


@dataclass(frozen=True)
class MovementParams:
    meas_var: float
    proc_var: float
    range: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.meas_var > 0:
            raise ValueError(f"meas_var must be positive, got {self.meas_var}")
        if not self.proc_var >= 0:
            raise ValueError(f"proc_var must be non-negative, got {self.proc_var}")
        if not self.range > 0:
            raise ValueError(f"range must be positive, got {self.range}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def ratio(self) -> float:
        """Variance ratio ``proc_var / meas_var``."""
        return self.proc_var / self.meas_var

    @classmethod
    def from_ratio(cls, meas_var, ratio, range, origin=(0.0, 0.0)):
        return cls(meas_var, ratio * meas_var, range, origin)

    def as_dict(self) -> dict:
        return {"meas_var": self.meas_var, "proc_var": self.proc_var,
                "range": self.range, "origin": list(self.origin)}


@dataclass
class TrajectoryDraws:
    """Posterior-predictive positions, ``draws[d, i, :]`` at ``times[i]``."""

    times: np.ndarray
    draws: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3 or self.draws.shape[1:] != (len(self.times), 2):
            raise ValueError(f"draws must have shape (D, {len(self.times)}, 2), got {self.draws.shape}")
        if self.draws.shape[0] < 1:
            raise ValueError("at least one draw required")
        if not np.all(np.isfinite(self.draws)):
            raise NumericalFailure("non-finite trajectory draw")
        if self.provenance is None:
            self.provenance = np.zeros(self.draws.shape[0], dtype=int)
        self.provenance = np.asarray(self.provenance)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def flat(self) -> np.ndarray:
        """``D x (2 n)`` layout: all x coordinates followed by all y coordinates."""
        return np.concatenate([self.draws[:, :, 0], self.draws[:, :, 1]], axis=1)

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


def _values(H) -> np.ndarray:
    return H.values if isinstance(H, BasisMatrix) else np.asarray(H, dtype=float)


def process_covariance(H: BasisMatrix, proc_var: float) -> np.ndarray:
    """Per-coordinate covariance ``proc_var * delta * H H'`` of the latent path."""
    V = H.values
    return proc_var * H.delta * (V @ V.T)


def _positions(s) -> np.ndarray:
    s = getattr(s, "xy", s)
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[1] != 2:
        raise ValueError(f"positions must be an (n, 2) array, got shape {s.shape}")
    return s


def _cholesky(A: np.ndarray, params: dict) -> np.ndarray:
    try:
        return linalg.cholesky(A, lower=True)
    except linalg.LinAlgError:
        bump = JITTER * float(np.mean(np.diag(A)))
        try:
            return linalg.cholesky(A + bump * np.eye(len(A)), lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalFailure("Cholesky factorization failed after jitter", params) from exc


def marginal_loglik(s, H: BasisMatrix, params: MovementParams) -> float:
    """Integrated log density of the telemetry positions (Woodbury route).

    ``s`` is an ``(n, 2)`` array of scaled positions (or anything with an
    ``xy`` attribute), and ``H`` the ``n x m`` basis at the observation times.
    """
    s = _positions(s)
    V = _values(H)
    n, m = V.shape
    if s.shape[0] != n:
        raise ValueError(f"{s.shape[0]} positions but basis has {n} rows")
    r = s - np.asarray(params.origin)[None, :]
    info = params.as_dict()
    if not np.all(np.isfinite(r)):
        raise NumericalFailure("non-finite positions or origin", info)
    ll = lowrank_loglik(r, V, params.meas_var, params.proc_var * H.delta, info)
    if not math.isfinite(ll):
        raise NumericalFailure("non-finite log likelihood", info)
    return ll


def lowrank_loglik(r: np.ndarray, V: np.ndarray, sig2: float, a: float, info=None) -> float:
    """Sum over columns of ``r`` of ``log N(r_c; 0, sig2 I + a V V')``.

    Uses the Woodbury identity and the determinant lemma with the ``m x m``
    inner matrix ``sig2 I + a V'V``.
    """
    n, m = V.shape
    k = r.shape[1]
    rr = float(np.sum(r * r))
    if a == 0.0:
        quad = rr / sig2
        logdet = k * n * math.log(sig2)
    else:
        inner = a * (V.T @ V)
        inner[np.diag_indices_from(inner)] += sig2
        L = _cholesky(inner, info)
        w = linalg.solve_triangular(L, V.T @ r, lower=True)
        quad = (rr - a * float(np.sum(w * w))) / sig2
        # det(sig2 I_n + a V V') = sig2^(n - m) det(inner)
        logdet = k * ((n - m) * math.log(sig2) + 2.0 * float(np.sum(np.log(np.diag(L)))))
    return -0.5 * (k * n * LOG_2PI + logdet + quad)


def dense_loglik(s, H: BasisMatrix, params: MovementParams) -> float:
    """Reference log density from a dense ``n x n`` Cholesky factorization."""
    s = _positions(s)
    Sigma = process_covariance(H, params.proc_var)
    Sigma[np.diag_indices_from(Sigma)] += params.meas_var
    r = s - np.asarray(params.origin)[None, :]
    L = _cholesky(Sigma, params.as_dict())
    w = linalg.solve_triangular(L, r, lower=True)
    n = len(r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (2 * n * LOG_2PI + 2 * logdet + float(np.sum(w * w)))


def _weight_posterior(s, H_obs: BasisMatrix, params: MovementParams):
    """Cholesky factor and mean of the white-noise weights given the data.

    With ``U = sqrt(proc_var * delta) H``, the weights ``b`` (one column per
    coordinate) have posterior mean ``(meas_var I + U'U)^{-1} U' r`` and
    covariance ``meas_var (meas_var I + U'U)^{-1}``.
    """
    s = _positions(s)
    V = _values(H_obs)
    if s.shape[0] != V.shape[0]:
        raise ValueError(f"{s.shape[0]} positions but basis has {V.shape[0]} rows")
    scale = math.sqrt(params.proc_var * H_obs.delta)
    U = scale * V
    A = U.T @ U
    A[np.diag_indices_from(A)] += params.meas_var
    L = _cholesky(A, params.as_dict())
    r = s - np.asarray(params.origin)[None, :]
    mean_b = linalg.cho_solve((L, True), U.T @ r)
    return L, mean_b, scale


def conditional_moments(s, H_obs: BasisMatrix, H_pred: BasisMatrix, params: MovementParams):
    """Mean ``(n_pred, 2)`` and per-coordinate covariance of the latent path.

    Standard Gaussian conditioning::

        mean = origin + C_ps Sigma_s^{-1} (s - origin)
        cov  = C_pp - C_ps Sigma_s^{-1} C_sp
    """
    s = _positions(s)
    Vo, Vp = _values(H_obs), _values(H_pred)
    a = params.proc_var * H_obs.delta
    origin = np.asarray(params.origin)
    C_ps = a * Vp @ Vo.T
    C_pp = a * Vp @ Vp.T
    Sigma = a * Vo @ Vo.T
    Sigma[np.diag_indices_from(Sigma)] += params.meas_var
    cf = linalg.cho_factor(Sigma, lower=True)
    mean = origin[None, :] + C_ps @ linalg.cho_solve(cf, s - origin[None, :])
    cov = C_pp - C_ps @ linalg.cho_solve(cf, C_ps.T)
    return mean, 0.5 * (cov + cov.T)


def predict_trajectory(s, H_obs: BasisMatrix, H_pred: BasisMatrix, params: MovementParams,
                       D: int, rng_seed=None, model_id: int = 0) -> TrajectoryDraws:
    """Draw latent positions at the prediction times given the data.

    Sampling goes through the white-noise weights, so the conditional
    covariance is positive semidefinite by construction; the moments equal
    those of :func:`conditional_moments`.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    Vp = _values(H_pred)
    origin = np.asarray(params.origin, dtype=float)
    n_pred = Vp.shape[0]
    if params.proc_var == 0.0:
        draws = np.broadcast_to(origin, (D, n_pred, 2)).copy()
        return TrajectoryDraws(H_pred.rows, draws, np.full(D, model_id))
    L, mean_b, scale = _weight_posterior(s, H_obs, params)
    m = L.shape[0]
    z = rng.standard_normal((D, m, 2))
    # b = mean_b + sqrt(meas_var) L^{-T} z
    noise = linalg.solve_triangular(L, z.transpose(1, 0, 2).reshape(m, 2 * D),
                                    lower=True, trans="T")
    b = mean_b[:, None, :] + math.sqrt(params.meas_var) * noise.reshape(m, D, 2)
    mu = origin[None, None, :] + scale * np.einsum("pm,mdc->dpc", Vp, b)
    if not np.all(np.isfinite(mu)):
        raise NumericalFailure("non-finite predictive draw", params.as_dict())
    return TrajectoryDraws(H_pred.rows, mu, np.full(D, model_id))


def path_summaries(draws: TrajectoryDraws, projection_meta) -> dict:
    """Per-draw path length (km) and mean speed (km/hr).

    ``projection_meta`` must provide ``scale_km`` (km per scaled position
    unit) and ``time_span_hours`` (hours per unit of scaled time).
    """
    if projection_meta is None:
        raise ValueError("path summaries need projection metadata to convert to km")
    try:
        scale_km = float(projection_meta.scale_km)
        span_h = float(projection_meta.time_span_hours)
    except AttributeError as exc:
        raise ValueError("projection metadata lacks scale_km/time_span_hours") from exc
    xy = draws.draws * scale_km
    seg = np.sqrt(np.sum(np.diff(xy, axis=1) ** 2, axis=2))
    length = seg.sum(axis=1)
    elapsed = (draws.times[-1] - draws.times[0]) * span_h if len(draws.times) > 1 else 0.0
    speed = length / elapsed if elapsed > 0 else np.zeros_like(length)
    return {
        "length_km": length,
        "speed_kmh": speed,
        "length_mean": float(length.mean()),
        "length_sd": float(length.std(ddof=1)) if len(length) > 1 else 0.0,
        "speed_mean": float(speed.mean()),
        "speed_sd": float(speed.std(ddof=1)) if len(speed) > 1 else 0.0,
    }


MIN_CIRCLE_DRAWS = 100


def credible_circle_radius(draws: TrajectoryDraws, t_index: int, level: float = 0.95) -> float:
    """Smallest radius about the mean position containing ``level`` of the draws."""
    if draws.n_draws < MIN_CIRCLE_DRAWS:
        raise ValueError(f"credible circle needs >= {MIN_CIRCLE_DRAWS} draws, got {draws.n_draws}")
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must lie in [0, 1]")
    pts = draws.draws[:, t_index, :]
    d = np.sort(np.sqrt(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    k = math.ceil(level * len(d) - 1e-12)
    return 0.0 if k <= 0 else float(d[k - 1])
