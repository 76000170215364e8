"""Nested-convolution group model with a latent-space dynamic network.

Three convolutions build each individual's path: white noise through the
Brownian indicator, Gaussian smoothing, then a time-local mixing across
individuals.  The first two collapse into the integrated Gaussian basis
``G`` (one row per observation, one column per grid node), so the design
row for an observation of individual ``j`` at time ``t`` is::

    B[(j, t), (k, :)] = W_jk(t) * G(t, :)

with ``W(t)`` the row-normalized network weights.  Network weights come from
latent points ``z_j(t)`` in an abstract plane, ``nu_jk = exp(-|z_j - z_k|^2)``.
The latent paths are themselves a Gaussian process convolution on a coarse
grid; between grid nodes they are interpolated by Nadaraya-Watson smoothing
with the same kernel.

Latent points are sampled through whitened coefficients ``eps`` with
``z_j = sigma_z * sqrt(delta_w) * H_z @ eps_j`` and ``eps ~ N(0, I)``, which
is the same prior as :func:`latent_z_logprior` without inverting the
near-singular latent covariance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .gp import (LOG_2PI, NumericalFailure, TrajectoryDraws, _cholesky,
                 credible_circle_radius, lowrank_loglik)
from .kernels import KernelSpec, TimeGrid, build_basis

__all__ = [
    "GroupModelSpec",
    "GroupData",
    "GroupParams",
    "GroupChains",
    "latent_basis",
    "interpolate_latent",
    "latent_z_logprior",
    "network_weights",
    "mixing_at_times",
    "build_H3",
    "degree",
    "group_design",
    "group_loglik",
    "group_dense_loglik",
    "fit_group",
    "predict_group",
    "uncertainty_comparison",
    "apply_holdout",
]


@dataclass
class GroupModelSpec:
    """Group model settings and priors.

    ``phi_prior`` is ``(shape, rate)`` of a gamma distribution; inverse-gamma
    pairs are ``(shape, scale)``.  ``aux_var_prior`` is recorded but not used
    by the likelihood.
    """

    J: int
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 1.0, 260))
    latent_grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 1.0, 15))
    phi: float = 0.01
    sigma_z: float = 10.0
    phi_z: float = 0.08
    meas_var_prior: tuple[float, float] = (1e-3, 1e-3)
    ratio_prior: tuple[float, float] = (1e-3, 1e-3)
    phi_prior: tuple[float, float] = (2.0, 200.0)
    origin_var_prior: tuple[float, float] = (1.0, 10.0)
    aux_var_prior: tuple[float, float] = (52.0, 10.0)

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("J must be at least 1")
        if self.latent_grid.m > self.grid.m:
            raise ValueError("latent grid must not be finer than the observation grid")
        if not (self.sigma_z > 0 and self.phi_z > 0 and self.phi > 0):
            raise ValueError("sigma_z, phi_z and phi must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"t_start": self.grid.t_start, "t_end": self.grid.t_end, "m": self.grid.m}
        d["latent_grid"] = {"t_start": self.latent_grid.t_start,
                            "t_end": self.latent_grid.t_end, "m": self.latent_grid.m}
        return d


@dataclass
class GroupData:
    """Per-individual observation times and ``(n_j, 2)`` scaled positions."""

    times: list
    xy: list
    ids: list | None = None

    def __post_init__(self):
        self.times = [np.asarray(t, dtype=float) for t in self.times]
        self.xy = [np.asarray(v, dtype=float).reshape(-1, 2) for v in self.xy]
        if len(self.times) != len(self.xy):
            raise ValueError("times and positions must list the same individuals")
        for t, v in zip(self.times, self.xy):
            if len(t) != len(v) or len(t) == 0:
                raise ValueError("each individual needs matching, non-empty times and positions")
        if self.ids is None:
            self.ids = [str(j) for j in range(len(self.times))]

    @property
    def J(self) -> int:
        return len(self.times)

    @property
    def ind(self) -> np.ndarray:
        return np.concatenate([np.full(len(t), j) for j, t in enumerate(self.times)])

    @property
    def t_all(self) -> np.ndarray:
        return np.concatenate(self.times)

    @property
    def xy_all(self) -> np.ndarray:
        return np.concatenate(self.xy, axis=0)

    def subset(self, j: int) -> "GroupData":
        return GroupData([self.times[j]], [self.xy[j]], [self.ids[j]])


@dataclass
class GroupParams:
    meas_var: float
    ratio: float
    phi: float
    mu0: np.ndarray

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(-1, 2)


# --------------------------------------------------------------------------
# latent network
# --------------------------------------------------------------------------

def latent_basis(spec: GroupModelSpec) -> np.ndarray:
    """``H_z`` on the latent grid: ``exp(-(t - tau)^2 / phi_z)``."""
    nodes = spec.latent_grid.nodes
    return np.exp(-(nodes[:, None] - nodes[None, :]) ** 2 / spec.phi_z)


def whitened_to_z(eps: np.ndarray, spec: GroupModelSpec) -> np.ndarray:
    """Map ``(J, m_w, 2)`` whitened coefficients to latent positions."""
    Hz = latent_basis(spec)
    return spec.sigma_z * math.sqrt(spec.latent_grid.delta) * np.einsum("ab,jbc->jac", Hz, eps)


def interpolate_latent(z: np.ndarray, latent_grid: TimeGrid, phi_z: float, times) -> np.ndarray:
    """Nadaraya-Watson smoothing of latent-grid values to arbitrary times."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    K = np.exp(-(t[:, None] - latent_grid.nodes[None, :]) ** 2 / phi_z)
    K /= K.sum(axis=1, keepdims=True)
    return np.einsum("tl,jlc->jtc", K, np.asarray(z, dtype=float))


def latent_z_logprior(z: np.ndarray, spec: GroupModelSpec) -> float:
    """Sum of per-individual, per-axis Gaussian log densities of the latent points.

    Covariance ``sigma_z^2 * delta_w * H_z H_z'``; a jitter of
    ``1e-10 * mean(diag)`` is added when the factorization fails.
    """
    z = np.asarray(z, dtype=float)
    mw = spec.latent_grid.m
    if z.ndim != 3 or z.shape[1:] != (mw, 2):
        raise ValueError(f"z must have shape (J, {mw}, 2), got {z.shape}")
    Hz = latent_basis(spec)
    C = spec.sigma_z ** 2 * spec.latent_grid.delta * (Hz @ Hz.T)
    L = _cholesky(C, {"sigma_z": spec.sigma_z, "phi_z": spec.phi_z})
    Y = z.transpose(1, 0, 2).reshape(mw, -1)
    W = linalg.solve_triangular(L, Y, lower=True)
    k = Y.shape[1]
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (k * mw * LOG_2PI + k * logdet + float(np.sum(W * W)))


def network_weights(z: np.ndarray, latent_grid: TimeGrid, phi_z: float, times) -> np.ndarray:
    """``nu[j, k, i] = exp(-|z_j(t_i) - z_k(t_i)|^2)``, shape ``(J, J, n)``."""
    zt = interpolate_latent(z, latent_grid, phi_z, times)  # (J, n, 2)
    d2 = np.sum((zt[:, None, :, :] - zt[None, :, :, :]) ** 2, axis=-1)
    nu = np.exp(-d2)
    J = nu.shape[0]
    nu[np.arange(J), np.arange(J), :] = 1.0
    return nu


def build_H3(nu: np.ndarray, t_index: int | None = None) -> np.ndarray:
    """Row-normalized mixing matrix at one time (``nu`` of shape ``(J, J)`` or ``(J, J, n)``)."""
    w = np.asarray(nu, dtype=float)
    if w.ndim == 3:
        w = w[:, :, t_index]
    return w / w.sum(axis=1, keepdims=True)


def mixing_at_times(z, latent_grid: TimeGrid, phi_z: float, times) -> np.ndarray:
    """Mixing matrices ``W(t_i)`` stacked to shape ``(n, J, J)``."""
    nu = network_weights(z, latent_grid, phi_z, times)
    nu = np.moveaxis(nu, 2, 0)
    return nu / nu.sum(axis=2, keepdims=True)


def degree(nu: np.ndarray, j: int, t_index=None):
    """Individual degree ``sum_{k != j} nu_jk(t)``."""
    nu = np.asarray(nu, dtype=float)
    row = nu[j] if t_index is None else nu[j, :, t_index]
    return np.sum(row, axis=0) - row[j]


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------

def _mixing_rows(z, spec: GroupModelSpec, data: GroupData) -> np.ndarray:
    """``Omega[i, k] = W_{j(i), k}(t_i)``, shape ``(N, J)``."""
    rows = []
    for j, t in enumerate(data.times):
        W = mixing_at_times(z, spec.latent_grid, spec.phi_z, t)  # (n_j, J, J)
        rows.append(W[:, j, :])
    return np.concatenate(rows, axis=0)


def _smooth_basis(data: GroupData, spec: GroupModelSpec, phi: float, times=None) -> np.ndarray:
    t = data.t_all if times is None else times
    return build_basis(KernelSpec("gaussian-integrated", phi), t, spec.grid).values


def group_design(data: GroupData, z, spec: GroupModelSpec, phi: float) -> np.ndarray:
    """Stacked ``N x (J m)`` design ``H3 H2 H1`` at the observation times."""
    G = _smooth_basis(data, spec, phi)
    Om = _mixing_rows(z, spec, data)
    N, m = G.shape
    return (Om[:, :, None] * G[:, None, :]).reshape(N, data.J * m)


def group_loglik(data: GroupData, z, params: GroupParams, spec: GroupModelSpec,
                 method: str = "auto") -> float:
    """Integrated log density of all individuals' positions.

    ``method="woodbury"`` factors the ``(J m) x (J m)`` inner matrix,
    ``"dense"`` the ``N x N`` covariance; ``"auto"`` picks the smaller.
    """
    B = group_design(data, z, spec, params.phi)
    N, p = B.shape
    r = data.xy_all - params.mu0[data.ind]
    proc_var = params.ratio * params.meas_var
    a = proc_var * spec.grid.delta
    info = {"meas_var": params.meas_var, "ratio": params.ratio, "phi": params.phi}
    if method == "auto":
        method = "woodbury" if p <= N else "dense"
    if method == "woodbury":
        ll = lowrank_loglik(r, B, params.meas_var, a, info)
    elif method == "dense":
        Sigma = a * (B @ B.T)
        Sigma[np.diag_indices_from(Sigma)] += params.meas_var
        ll = _dense_gauss(r, Sigma, info)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not math.isfinite(ll):
        raise NumericalFailure("non-finite group log likelihood", info)
    return ll


def _dense_gauss(r, Sigma, info=None) -> float:
    L = _cholesky(Sigma, info)
    w = linalg.solve_triangular(L, r, lower=True)
    n, k = r.shape
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (k * n * LOG_2PI + k * logdet + float(np.sum(w * w)))


def group_dense_loglik(data: GroupData, z, params: GroupParams, spec: GroupModelSpec) -> float:
    """Reference evaluation that forms the full ``2N x 2N`` covariance."""
    B = group_design(data, z, spec, params.phi)
    a = params.ratio * params.meas_var * spec.grid.delta
    block = a * (B @ B.T)
    N = len(block)
    Sigma = np.zeros((2 * N, 2 * N))
    Sigma[:N, :N] = block
    Sigma[N:, N:] = block
    Sigma[np.diag_indices_from(Sigma)] += params.meas_var
    r = data.xy_all - params.mu0[data.ind]
    vec = np.concatenate([r[:, 0], r[:, 1]])[:, None]
    return _dense_gauss(vec, Sigma)


class _Factor:
    """Factorization of ``K = I + a * B B'`` in whichever form is cheaper."""

    def __init__(self, a, G, GG, Om, info):
        N, m = G.shape
        J = Om.shape[1]
        self.dense = N <= J * m
        if self.dense:
            K = a * GG * (Om @ Om.T)
            K[np.diag_indices_from(K)] += 1.0
            self.L = _cholesky(K, info)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))
        else:
            self.a = a
            self.B = (Om[:, :, None] * G[:, None, :]).reshape(N, J * m)
            inner = a * (self.B.T @ self.B)
            inner[np.diag_indices_from(inner)] += 1.0
            self.L = _cholesky(inner, info)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, R):
        if self.dense:
            return linalg.cho_solve((self.L, True), R)
        inner = linalg.cho_solve((self.L, True), self.B.T @ R)
        return R - self.a * (self.B @ inner)


# --------------------------------------------------------------------------
# sampler
# --------------------------------------------------------------------------

@dataclass
class GroupChains:
    meas_var: np.ndarray
    ratio: np.ndarray
    phi: np.ndarray
    mu0: np.ndarray       # (S, J, 2)
    origin_var: np.ndarray
    eps: np.ndarray       # (S, J, m_w, 2)
    loglik: np.ndarray
    accept: dict
    seed: int | None
    spec: GroupModelSpec = field(repr=False)
    diagnostics: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.meas_var)

    @property
    def proc_var(self) -> np.ndarray:
        return self.ratio * self.meas_var

    def z(self, s: int) -> np.ndarray:
        return whitened_to_z(self.eps[s], self.spec)

    def nu_draws(self, times) -> np.ndarray:
        """Network weights for every draw, shape ``(S, J, J, n)``."""
        return np.stack([network_weights(self.z(s), self.spec.latent_grid, self.spec.phi_z, times)
                         for s in range(len(self))])

    def degree_draws(self, times) -> np.ndarray:
        """Degrees for every draw, shape ``(S, J, n)``."""
        nu = self.nu_draws(times)
        J = nu.shape[1]
        return nu.sum(axis=2) - nu[:, np.arange(J), np.arange(J), :]

    def summary(self) -> dict:
        out = {}
        for name in ("meas_var", "ratio", "proc_var", "phi", "origin_var"):
            v = getattr(self, name)
            lo, hi = np.quantile(v, [0.025, 0.975])
            out[name] = {"mean": float(v.mean()), "q025": float(lo), "q975": float(hi)}
        out["accept"] = dict(self.accept)
        return out

    def to_csv(self, path) -> None:
        J = self.mu0.shape[1]
        head = ["iteration", "meas_var", "ratio", "phi", "origin_var", "loglik"]
        head += [f"mu0_{j}_{c}" for j in range(J) for c in "xy"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            for s in range(len(self)):
                row = [s] + [f"{v:.12g}" for v in (self.meas_var[s], self.ratio[s], self.phi[s],
                                                   self.origin_var[s], self.loglik[s])]
                row += [f"{v:.12g}" for v in self.mu0[s].ravel()]
                w.writerow(row)

    def save(self, path) -> None:
        np.savez(path, meas_var=self.meas_var, ratio=self.ratio, phi=self.phi, mu0=self.mu0,
                 origin_var=self.origin_var, eps=self.eps, loglik=self.loglik)

    @classmethod
    def load(cls, path, spec: GroupModelSpec, accept=None, seed=None) -> "GroupChains":
        with np.load(path) as f:
            return cls(f["meas_var"], f["ratio"], f["phi"], f["mu0"], f["origin_var"],
                       f["eps"], f["loglik"], dict(accept or {}), seed, spec)


def _clusters_to_eps(labels, spec: GroupModelSpec, spacing: float = 6.0) -> np.ndarray:
    """Whitened coefficients whose latent paths are (nearly) constant per cluster.

    Cluster ``c`` sits at ``spacing * (c, 0)``, so members of one cluster
    coincide and distinct clusters have network weight ``exp(-spacing**2)``.
    """
    mw = spec.latent_grid.m
    M = spec.sigma_z * math.sqrt(spec.latent_grid.delta) * latent_basis(spec)
    ridge = 1e-6 * float(np.trace(M @ M.T)) / mw
    solve = M.T @ np.linalg.inv(M @ M.T + ridge * np.eye(mw))
    eps = np.zeros((len(labels), mw, 2))
    for j, c in enumerate(labels):
        target = np.zeros((mw, 2))
        target[:, 0] = spacing * c
        eps[j] = solve @ target
    return eps


def _greedy_network_init(J: int, spec: GroupModelSpec, score) -> np.ndarray:
    """Agglomerative start: merge the cluster pair that most improves ``score``."""
    labels = list(range(J))
    cur = score(_clusters_to_eps(labels, spec))
    while len(set(labels)) > 1:
        best = None
        groups = sorted(set(labels))
        for a_i, a in enumerate(groups):
            for b in groups[a_i + 1:]:
                trial = [a if c == b else c for c in labels]
                val = score(_clusters_to_eps(_relabel(trial), spec))
                if best is None or val > best[0]:
                    best = (val, trial)
        if best[0] <= cur:
            break
        cur, labels = best[0], best[1]
    return _clusters_to_eps(_relabel(labels), spec)


def _relabel(labels):
    order = {c: i for i, c in enumerate(dict.fromkeys(labels))}
    return [order[c] for c in labels]


def _ess_step(rng, f, cur_ll, loglik_fn, max_shrink=60):
    """One elliptical slice sampling update for a standard normal prior."""
    nu = rng.standard_normal(f.shape)
    thresh = cur_ll + math.log(rng.random())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = theta - 2.0 * math.pi, theta
    for _ in range(max_shrink):
        prop = f * math.cos(theta) + nu * math.sin(theta)
        ll = loglik_fn(prop)
        if ll > thresh:
            return prop, ll
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    return f, cur_ll


def fit_group(data: GroupData, spec: GroupModelSpec, iterations: int = 2000,
              burn_in: int | None = None, thin: int = 1, seed: int = 0,
              init_eps: np.ndarray | None = None, fixed_network: str | None = None,
              proposal_sd: float = 0.3) -> GroupChains:
    """Metropolis-within-Gibbs over the group model; deterministic given the seed.

    Per sweep: elliptical slice updates of each individual's latent
    coefficients, log-scale random walks for the variance ratio and the
    range, then conjugate draws of the measurement variance, the initial
    positions and their prior variance.

    ``fixed_network="independent"`` skips the latent updates and pins the
    mixing matrix to the identity (each individual on its own).
    """
    if data.J != spec.J:
        raise ValueError(f"spec expects J={spec.J} individuals, data has {data.J}")
    burn_in = iterations // 2 if burn_in is None else burn_in
    if not iterations > burn_in >= 0:
        raise ValueError("need iterations > burn_in >= 0")
    rng = np.random.default_rng(seed)
    J, mw = spec.J, spec.latent_grid.m
    ind = data.ind
    xy = data.xy_all
    N = len(xy)
    A = np.zeros((N, J))
    A[np.arange(N), ind] = 1.0
    delta = spec.grid.delta
    a_s, b_s = spec.meas_var_prior
    a_r, b_r = spec.ratio_prior
    k_phi, rate_phi = spec.phi_prior
    a_0, b_0 = spec.origin_var_prior

    basis_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def basis(phi):
        hit = basis_cache.get(phi)
        if hit is None:
            G = _smooth_basis(data, spec, phi)
            hit = (G, G @ G.T)
            if len(basis_cache) > 4:
                basis_cache.pop(next(iter(basis_cache)))
            basis_cache[phi] = hit
        return hit

    independent = fixed_network == "independent"
    if independent:
        Om_fixed = A.copy()

    def omega(eps):
        if independent:
            return Om_fixed
        return _mixing_rows(whitened_to_z(eps, spec), spec, data)

    def loglik(sig2, ratio, phi, mu0, Om):
        G, GG = basis(phi)
        fac = _Factor(ratio * delta, G, GG, Om, {"meas_var": sig2, "ratio": ratio, "phi": phi})
        r = xy - mu0[ind]
        quad = float(np.sum(r * fac.solve(r)))
        return -0.5 * (2 * N * (LOG_2PI + math.log(sig2)) + 2 * fac.logdet + quad / sig2), fac

    # initial values: origins at first fixes, variance ratio from a profile
    # likelihood of the independent model, network by greedy cluster search
    mu0 = np.array([v[0] for v in data.xy])
    sig0 = float(np.mean(mu0 ** 2)) + 1.0
    phi = spec.phi
    best = None
    for ratio_try in np.geomspace(1e-1, 1e5, 25):
        G, GG = basis(phi)
        fac = _Factor(ratio_try * delta, G, GG, A, None)
        r = xy - mu0[ind]
        quad = float(np.sum(r * fac.solve(r)))
        sig2_try = quad / (2 * N)
        prof = -N * math.log(sig2_try) - fac.logdet
        if best is None or prof > best[0]:
            best = (prof, ratio_try, sig2_try)
    _, ratio, sig2 = best
    if init_eps is not None:
        eps = np.array(init_eps, dtype=float)
    elif independent:
        eps = np.zeros((J, mw, 2))
    else:
        eps = _greedy_network_init(J, spec, lambda e: loglik(sig2, ratio, phi, mu0, omega(e))[0])
    Om = omega(eps)
    cur, fac = loglik(sig2, ratio, phi, mu0, Om)

    steps = {"ratio": math.log(proposal_sd), "phi": math.log(proposal_sd)}
    acc = {"ratio": 0, "phi": 0}
    n_post = 0
    n_keep = (iterations - burn_in) // thin
    out = {k: np.empty(n_keep) for k in ("meas_var", "ratio", "phi", "origin_var", "loglik")}
    out_mu0 = np.empty((n_keep, J, 2))
    out_eps = np.empty((n_keep, J, mw, 2))
    keep = 0
    diagnostics = []

    # latent moves start once the other parameters have settled on the
    # initial network; the cluster search is then repeated at those values
    z_warmup = burn_in // 4
    for it in range(iterations):
        if it == z_warmup and z_warmup > 0 and not independent and init_eps is None:
            eps = _greedy_network_init(J, spec, lambda e: loglik(sig2, ratio, phi, mu0, omega(e))[0])
            Om = omega(eps)
            cur, fac = loglik(sig2, ratio, phi, mu0, Om)
        # latent network coefficients
        if not independent and it >= z_warmup:
            for j in range(J):
                def ll_j(e_j, j=j):
                    trial = eps.copy()
                    trial[j] = e_j
                    return loglik(sig2, ratio, phi, mu0, omega(trial))[0]
                eps[j], cur = _ess_step(rng, eps[j], cur, ll_j)
            Om = omega(eps)

        # variance ratio: log-scale random walk, inverse-gamma prior
        prop = ratio * math.exp(math.exp(steps["ratio"]) * rng.standard_normal())
        new, new_fac = loglik(sig2, prop, phi, mu0, Om)
        lp_cur = -(a_r + 1) * math.log(ratio) - b_r / ratio + math.log(ratio)
        lp_new = -(a_r + 1) * math.log(prop) - b_r / prop + math.log(prop)
        p_acc = math.exp(min(0.0, new + lp_new - cur - lp_cur))
        if rng.random() < p_acc:
            ratio, cur, fac = prop, new, new_fac
            if it >= burn_in:
                acc["ratio"] += 1
        if it < burn_in:
            steps["ratio"] += (p_acc - 0.44) / (it + 1) ** 0.6

        # range: log-scale random walk, gamma(shape, rate) prior
        prop = phi * math.exp(math.exp(steps["phi"]) * rng.standard_normal())
        new, new_fac = loglik(sig2, ratio, prop, mu0, Om)
        lp_cur = k_phi * math.log(phi) - rate_phi * phi
        lp_new = k_phi * math.log(prop) - rate_phi * prop
        p_acc = math.exp(min(0.0, new + lp_new - cur - lp_cur))
        if rng.random() < p_acc:
            phi, cur, fac = prop, new, new_fac
            if it >= burn_in:
                acc["phi"] += 1
        if it < burn_in:
            steps["phi"] += (p_acc - 0.44) / (it + 1) ** 0.6

        # measurement variance: conjugate
        r = xy - mu0[ind]
        quad = float(np.sum(r * fac.solve(r)))
        sig2 = (b_s + 0.5 * quad) / rng.gamma(a_s + N)

        # initial positions: conjugate normal, independent across axes
        KA = fac.solve(A)
        prec = A.T @ KA / sig2 + np.eye(J) / sig0
        Lp = linalg.cholesky(prec, lower=True)
        rhs = KA.T @ xy / sig2
        mean = linalg.cho_solve((Lp, True), rhs)
        mu0 = mean + linalg.solve_triangular(Lp, rng.standard_normal((J, 2)), lower=True, trans="T")

        # origin prior variance: conjugate
        sig0 = (b_0 + 0.5 * float(np.sum(mu0 ** 2))) / rng.gamma(a_0 + J)

        cur, fac = loglik(sig2, ratio, phi, mu0, Om)
        if not math.isfinite(cur):
            raise NumericalFailure("non-finite group likelihood during sampling",
                                   {"meas_var": sig2, "ratio": ratio, "phi": phi})
        if it >= burn_in:
            n_post += 1
            if (it - burn_in + 1) % thin == 0:
                out["meas_var"][keep] = sig2
                out["ratio"][keep] = ratio
                out["phi"][keep] = phi
                out["origin_var"][keep] = sig0
                out["loglik"][keep] = cur
                out_mu0[keep] = mu0
                out_eps[keep] = eps
                keep += 1

    rates = {k: acc[k] / n_post for k in acc}
    for k, v in rates.items():
        if v == 0:
            diagnostics.append(f"no accepted {k} proposals after burn-in")
    return GroupChains(out["meas_var"], out["ratio"], out["phi"], out_mu0, out["origin_var"],
                       out_eps, out["loglik"], rates, seed if isinstance(seed, int) else None,
                       spec, diagnostics)


# --------------------------------------------------------------------------
# prediction and uncertainty
# --------------------------------------------------------------------------

def predict_group(data: GroupData, chains: GroupChains, pred_times, per_draw: int = 1,
                  seed: int = 0, draw_indices=None, independent: bool = False) -> list[TrajectoryDraws]:
    """Posterior-predictive paths ``mu_j(t)`` for every individual.

    For each retained posterior draw the white-noise weights are sampled from
    their Gaussian conditional given the data, then pushed through the
    design at ``pred_times``.
    """
    spec = chains.spec
    rng = np.random.default_rng(seed)
    t_pred = np.asarray(pred_times, dtype=float)
    J, m = spec.J, spec.grid.m
    idx = np.arange(len(chains)) if draw_indices is None else np.asarray(draw_indices)
    xy = data.xy_all
    ind = data.ind
    N = len(xy)
    A = np.zeros((N, J))
    A[np.arange(N), ind] = 1.0
    out = [[] for _ in range(J)]
    for s in idx:
        sig2, ratio, phi = chains.meas_var[s], chains.ratio[s], chains.phi[s]
        mu0 = chains.mu0[s]
        G = _smooth_basis(data, spec, phi)
        Gp = _smooth_basis(data, spec, phi, times=t_pred)
        if independent:
            Om = A
            Wp = np.broadcast_to(np.eye(J), (len(t_pred), J, J))
        else:
            z = chains.z(s)
            Om = _mixing_rows(z, spec, data)
            Wp = mixing_at_times(z, spec.latent_grid, spec.phi_z, t_pred)
        U = math.sqrt(ratio * sig2 * spec.grid.delta) * (Om[:, :, None] * G[:, None, :]).reshape(N, J * m)
        inner = U.T @ U
        inner[np.diag_indices_from(inner)] += sig2
        L = _cholesky(inner, {"meas_var": sig2, "ratio": ratio, "phi": phi})
        r = xy - mu0[ind]
        mean_b = linalg.cho_solve((L, True), U.T @ r)
        z_std = rng.standard_normal((J * m, 2 * per_draw))
        noise = linalg.solve_triangular(L, z_std, lower=True, trans="T")
        b = mean_b[:, None, :] + math.sqrt(sig2) * noise.reshape(J * m, per_draw, 2)
        scale = math.sqrt(ratio * sig2 * spec.grid.delta)
        own = np.einsum("pm,kmdc->kpdc", Gp, b.reshape(J, m, per_draw, 2))   # (J, n_pred, D, 2)
        mixed = np.einsum("pjk,kpdc->jdpc", Wp, own)
        paths = mu0[:, None, None, :] + scale * mixed                        # (J, D, n_pred, 2)
        for j in range(J):
            out[j].append(paths[j])
    return [TrajectoryDraws(t_pred, np.concatenate(out[j], axis=0)) for j in range(J)]


def apply_holdout(data: GroupData, windows) -> GroupData:
    """Drop observations of individual ``j`` inside each ``(j, lo, hi)`` window."""
    times = [t.copy() for t in data.times]
    xy = [v.copy() for v in data.xy]
    for j, lo, hi in windows:
        keep = (times[j] < lo) | (times[j] > hi)
        times[j], xy[j] = times[j][keep], xy[j][keep]
    return GroupData(times, xy, list(data.ids))


def uncertainty_comparison(data: GroupData, joint: GroupChains, independent,
                           pred_times, per_draw: int = 4, seed: int = 0, level: float = 0.95,
                           draw_indices=None) -> dict:
    """Credible-circle radii per individual under the joint and independent fits.

    ``independent`` is either one chain fitted to all of ``data`` with
    ``fixed_network="independent"`` (shared parameters, no mixing) or a list
    whose entry ``j`` is a single-individual fit to ``data.subset(j)``.
    Returns arrays of shape ``(J, n_pred)`` under keys ``radius_joint`` and
    ``radius_independent``.
    """
    t_pred = np.asarray(pred_times, dtype=float)
    joint_draws = predict_group(data, joint, t_pred, per_draw, seed, draw_indices)
    J = data.J
    if isinstance(independent, GroupChains):
        ind_draws = predict_group(data, independent, t_pred, per_draw, seed + 1, draw_indices,
                                  independent=True)
    else:
        ind_draws = [predict_group(data.subset(j), independent[j], t_pred, per_draw, seed + 1 + j,
                                   draw_indices, independent=True)[0] for j in range(J)]
    rj = np.empty((J, len(t_pred)))
    ri = np.empty((J, len(t_pred)))
    for j in range(J):
        for i in range(len(t_pred)):
            rj[j, i] = credible_circle_radius(joint_draws[j], i, level)
            ri[j, i] = credible_circle_radius(ind_draws[j], i, level)
    return {"times": t_pred, "radius_joint": rj, "radius_independent": ri}
