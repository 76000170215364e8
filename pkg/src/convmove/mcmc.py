"""Metropolis-within-Gibbs fits for a single individual.

Parameters are the measurement variance ``meas_var``, the standard-deviation
ratio ``ratio_sd = sqrt(proc_var / meas_var)`` and the kernel range ``phi``
on a discrete grid.  Writing the marginal covariance of one coordinate as
``meas_var * (I + ratio_sd**2 * delta * H H')`` gives

* a conjugate inverse-gamma full conditional for ``meas_var``,
* a discrete full conditional for ``phi`` over the grid,
* a log-scale random-walk Metropolis step for ``ratio_sd`` under its
  uniform prior.

For every grid value of ``phi`` the singular values of ``H`` and the
projections of the data onto its left singular vectors are cached, so a
likelihood evaluation costs ``O(min(n, m))``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .gp import LOG_2PI, MovementParams, dense_loglik, marginal_loglik
from .kernels import KernelSpec, TimeGrid, build_basis
from .warp import WarpSpec

log = logging.getLogger(__name__)

__all__ = [
    "FitConfig",
    "PhiGramCache",
    "PosteriorChains",
    "precompute_phi_gram",
    "fit_single",
    "fit_many",
    "deviance_screen",
    "ScreenResult",
    "default_phi_grid",
    "CacheTooLarge",
    "phi_conditional",
    "meas_var_conditional",
]


def default_phi_grid() -> np.ndarray:
    return np.linspace(0.001, 0.02, 100)


class CacheTooLarge(MemoryError):
    pass


@dataclass
class FitConfig:
    """Single-individual sampler settings.

    ``meas_var_prior`` holds the two inverse-gamma numbers in the order named
    by ``meas_var_prior_order``: ``"scale-shape"`` (default, shape 2 and scale
    1.0558e-10, an informative GPS-accuracy prior on the scaled domain) or
    ``"shape-scale"``.  The density is ``x**(-shape - 1) * exp(-scale / x)``.
    ``origin`` pins the path origin; ``None`` uses the first fix.
    """

    phi_grid: np.ndarray = field(default_factory=default_phi_grid)
    family: str = "gaussian-integrated"
    m: int = 800
    meas_var_prior: tuple[float, float] = (1.0558e-10, 2.0)
    meas_var_prior_order: str = "scale-shape"
    ratio_sd_upper: float = 20.0
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0
    proposal_sd: float = 0.3
    target_accept: float = 0.44
    use_likelihood: bool = True
    cache_cap_bytes: int = 4 * 2**30
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        grid = np.asarray(self.phi_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("phi_grid must be a non-empty 1-D sequence")
        if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("phi_grid must be positive and strictly increasing")
        self.phi_grid = grid
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.meas_var_prior_order not in ("scale-shape", "shape-scale"):
            raise ValueError(f"unknown meas_var_prior_order {self.meas_var_prior_order!r}")
        if not self.ratio_sd_upper > 0:
            raise ValueError("ratio_sd_upper must be positive")

    @property
    def ig_shape_scale(self) -> tuple[float, float]:
        a, b = self.meas_var_prior
        return (b, a) if self.meas_var_prior_order == "scale-shape" else (a, b)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, 1.0, self.m)

    def kernel(self, phi: float) -> KernelSpec:
        if self.family == "brownian-indicator":
            return KernelSpec(self.family)
        return KernelSpec(self.family, float(phi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi_grid"] = [float(v) for v in self.phi_grid]
        d["meas_var_prior"] = list(self.meas_var_prior)
        return d


def _times_xy(s):
    if isinstance(s, tuple) and len(s) == 2:
        t, xy = s
    else:
        t, xy = s.times, s.xy
    t = np.asarray(t, dtype=float)
    xy = np.asarray(xy, dtype=float)
    if xy.shape != (len(t), 2):
        raise ValueError("telemetry must provide n times and (n, 2) positions")
    return t, xy


class PhiGramCache:
    """Spectral summaries of the basis for every grid value of ``phi``.

    With ``H = U S V'`` (thin SVD) and residuals ``r`` about the origin,
    each entry stores ``lam = S**2`` and ``proj = sum_c (U' r_c)**2`` plus the
    squared norm of the residual orthogonal to ``range(U)``; those are all a
    likelihood evaluation needs.
    """

    def __init__(self, times, xy, phi_grid, grid: TimeGrid, family: str = "gaussian-integrated",
                 warp: WarpSpec | None = None, origin=None, cap_bytes: int = 4 * 2**30):
        self.times = np.asarray(times, dtype=float)
        self.xy = np.asarray(xy, dtype=float)
        self.phi_grid = np.asarray(phi_grid, dtype=float)
        self.grid = grid
        self.family = family
        self.warp = warp
        self.origin = np.asarray(self.xy[0] if origin is None else origin, dtype=float)
        n = len(self.times)
        need = len(self.phi_grid) * grid.m * grid.m * 8
        if need > cap_bytes:
            raise CacheTooLarge(
                f"phi cache needs ~{need / 2**30:.2f} GiB for {len(self.phi_grid)} phi values "
                f"at m={grid.m}; reduce the phi grid or m, or raise cache_cap_bytes"
            )
        self.n = n
        self.delta = grid.delta
        self.residual = self.xy - self.origin[None, :]
        self.rr = float(np.sum(self.residual ** 2))
        self.lam = []
        self.proj = []
        self.perp = []
        self.builds = 0
        for phi in self.phi_grid:
            lam, proj, perp = self._entry(phi)
            self.lam.append(lam)
            self.proj.append(proj)
            self.perp.append(perp)
        k = max(len(v) for v in self.lam)
        self.lam = np.array([np.pad(v, (0, k - len(v))) for v in self.lam])
        self.proj = np.array([np.pad(v, (0, k - len(v))) for v in self.proj])
        self.perp = np.array(self.perp)
        self.hits = 0

    def kernel(self, phi) -> KernelSpec:
        if self.family == "brownian-indicator":
            return KernelSpec(self.family)
        return KernelSpec(self.family, float(phi))

    def basis(self, phi, times=None):
        t = self.times if times is None else times
        return build_basis(self.kernel(phi), t, self.grid, self.warp)

    def _entry(self, phi):
        self.builds += 1
        V = self.basis(phi).values
        U, S, _ = linalg.svd(V, full_matrices=False, lapack_driver="gesdd")
        Ur = U.T @ self.residual
        perp_vec = self.residual - U @ Ur
        return S * S, np.sum(Ur * Ur, axis=1), float(np.sum(perp_vec ** 2))

    def rebuild(self, index: int):
        """Recompute entry ``index`` from scratch (used to check the cache)."""
        lam, proj, perp = self._entry(self.phi_grid[index])
        k = self.lam.shape[1]
        return np.pad(lam, (0, k - len(lam))), np.pad(proj, (0, k - len(proj))), perp

    def quad_logdet(self, ratio, index=None):
        """``r' K^{-1} r`` and ``log det K`` summed over both coordinates.

        ``K = I + ratio * delta * H H'``; ``index`` selects grid rows (all by
        default), so the outputs broadcast over the grid.
        """
        lam = self.lam if index is None else self.lam[index]
        proj = self.proj if index is None else self.proj[index]
        perp = self.perp if index is None else self.perp[index]
        self.hits += 1
        al = ratio * self.delta * lam
        quad = perp + np.sum(proj / (1.0 + al), axis=-1)
        logdet = 2.0 * np.sum(np.log1p(al), axis=-1)
        return quad, logdet

    def loglik(self, meas_var, ratio, index=None):
        quad, logdet = self.quad_logdet(ratio, index)
        n2 = 2 * self.n
        return -0.5 * (n2 * (LOG_2PI + math.log(meas_var)) + logdet + quad / meas_var)

    def params(self, meas_var, ratio, index) -> MovementParams:
        return MovementParams.from_ratio(meas_var, ratio, float(self.phi_grid[index]),
                                         tuple(self.origin))


def precompute_phi_gram(s, config: FitConfig, warp: WarpSpec | None = None) -> PhiGramCache:
    t, xy = _times_xy(s)
    return PhiGramCache(t, xy, config.phi_grid, config.grid, config.family, warp,
                        origin=config.origin, cap_bytes=config.cache_cap_bytes)


@dataclass
class PosteriorChains:
    meas_var: np.ndarray
    ratio_sd: np.ndarray
    phi_index: np.ndarray
    phi: np.ndarray
    loglik: np.ndarray
    accept_ratio: float
    seed: int
    model_id: int = 0
    warp: WarpSpec | None = None
    proposal_sd: float = float("nan")
    diagnostics: list = field(default_factory=list)
    cache: PhiGramCache | None = field(default=None, repr=False, compare=False)

    @property
    def ratio(self) -> np.ndarray:
        """Variance ratio ``proc_var / meas_var``."""
        return self.ratio_sd ** 2

    @property
    def proc_var(self) -> np.ndarray:
        return self.ratio * self.meas_var

    def __len__(self) -> int:
        return len(self.meas_var)

    def posterior_mean(self) -> dict:
        return {
            "meas_var": float(np.mean(self.meas_var)),
            "ratio": float(np.mean(self.ratio)),
            "proc_var": float(np.mean(self.proc_var)),
            "phi": float(np.mean(self.phi)),
        }

    def summary(self) -> dict:
        out = {}
        for name in ("meas_var", "ratio", "proc_var", "phi"):
            v = getattr(self, name)
            lo, hi = np.quantile(v, [0.025, 0.975])
            out[name] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                         "q025": float(lo), "q975": float(hi)}
        out["accept_ratio"] = self.accept_ratio
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "meas_var", "ratio", "phi", "phi_index", "loglik"])
            for i in range(len(self)):
                w.writerow([i, f"{self.meas_var[i]:.12g}", f"{self.ratio[i]:.12g}",
                            f"{self.phi[i]:.12g}", int(self.phi_index[i]), f"{self.loglik[i]:.12g}"])

    def manifest(self) -> dict:
        return {
            "model_id": self.model_id,
            "seed": self.seed,
            "accept_ratio": self.accept_ratio,
            "proposal_sd": self.proposal_sd,
            "warp": None if self.warp is None else self.warp.to_dict(),
            "draws": len(self),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_csv(cls, path, manifest: dict, phi_grid) -> "PosteriorChains":
        rows = list(csv.DictReader(open(path, newline="")))
        idx = np.array([int(r["phi_index"]) for r in rows])
        warp = manifest.get("warp")
        return cls(
            meas_var=np.array([float(r["meas_var"]) for r in rows]),
            ratio_sd=np.sqrt(np.array([float(r["ratio"]) for r in rows])),
            phi_index=idx,
            phi=np.asarray(phi_grid)[idx],
            loglik=np.array([float(r["loglik"]) for r in rows]),
            accept_ratio=float(manifest.get("accept_ratio", float("nan"))),
            seed=manifest.get("seed"),
            model_id=int(manifest.get("model_id", 0)),
            warp=None if warp is None else WarpSpec(**warp),
            proposal_sd=float(manifest.get("proposal_sd", float("nan"))),
            diagnostics=list(manifest.get("diagnostics", [])),
        )


def _sample_discrete(rng, p):
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(p), u, side="right")), len(p) - 1)


def phi_conditional(cache: PhiGramCache, meas_var: float, ratio: float) -> np.ndarray:
    """Full-conditional probabilities over the phi grid (uniform prior)."""
    logp = cache.loglik(meas_var, ratio)
    p = np.exp(logp - np.max(logp))
    return p / p.sum()


def meas_var_conditional(cache: PhiGramCache, ratio: float, index: int,
                         prior_shape_scale: tuple[float, float]) -> tuple[float, float]:
    """Inverse-gamma ``(shape, scale)`` of the measurement variance given the rest.

    The covariance factors as ``meas_var * K(ratio, phi)``, so with ``q`` the
    quadratic form in ``K^{-1}`` over ``2n`` values the conditional is
    ``IG(shape0 + n, scale0 + q / 2)``.
    """
    shape0, scale0 = prior_shape_scale
    quad, _ = cache.quad_logdet(ratio, index)
    return shape0 + cache.n, scale0 + 0.5 * float(quad)


def _initial_state(cache: PhiGramCache, config: FitConfig):
    """Profile-likelihood start: best (ratio_sd, phi) with meas_var at its mode."""
    rho = np.geomspace(1e-2, config.ratio_sd_upper, 40)[:-1]
    best = (-np.inf, None)
    n2 = 2 * cache.n
    for r in rho:
        quad, logdet = cache.quad_logdet(r * r)
        sig2 = np.maximum(quad / n2, 1e-300)
        ll = -0.5 * (n2 * np.log(sig2) + logdet + n2)
        k = int(np.argmax(ll))
        if ll[k] > best[0]:
            best = (ll[k], (float(r), k, float(sig2[k])))
    return best[1]


def fit_single(s, warp: WarpSpec | None, config: FitConfig, model_id: int = 0,
               cache: PhiGramCache | None = None, seed=None) -> PosteriorChains:
    """Run one Metropolis-within-Gibbs chain; deterministic given the seed."""
    seed = config.seed if seed is None else seed
    if cache is None:
        cache = precompute_phi_gram(s, config, warp)
    rng = np.random.default_rng(seed)
    shape0, scale0 = config.ig_shape_scale
    upper = config.ratio_sd_upper
    log_upper = math.log(upper)
    use_lik = config.use_likelihood

    if use_lik:
        rho, idx, sig2 = _initial_state(cache, config)
    else:
        rho, idx, sig2 = upper / 2.0, len(config.phi_grid) // 2, scale0 / max(shape0, 1.0)
    log_step = math.log(config.proposal_sd)

    def target_rho(r, sig2, idx):
        ll = cache.loglik(sig2, r * r, idx) if use_lik else 0.0
        return ll + math.log(r)

    n_keep = (config.iterations - config.burn_in) // config.thin
    out_sig2 = np.empty(n_keep)
    out_rho = np.empty(n_keep)
    out_idx = np.empty(n_keep, dtype=int)
    out_ll = np.empty(n_keep)
    accepted = 0
    proposed = 0
    cur = target_rho(rho, sig2, idx)
    keep = 0
    for it in range(config.iterations):
        # phi: discrete full conditional, uniform prior over the grid
        if use_lik:
            idx = _sample_discrete(rng, phi_conditional(cache, sig2, rho * rho))
        else:
            idx = int(rng.integers(len(config.phi_grid)))
        # meas_var: conjugate inverse gamma
        if use_lik:
            shape, scale = meas_var_conditional(cache, rho * rho, idx, (shape0, scale0))
        else:
            shape, scale = shape0, scale0
        sig2 = scale / rng.gamma(shape)
        # ratio_sd: random walk on the log scale, Unif(0, upper) prior
        cur = target_rho(rho, sig2, idx)
        log_prop = math.log(rho) + math.exp(log_step) * rng.standard_normal()
        prop = math.exp(log_prop) if log_prop < log_upper else upper
        acc_prob = 0.0
        if 0.0 < prop < upper:
            new = target_rho(prop, sig2, idx)
            acc_prob = math.exp(min(0.0, new - cur))
            if rng.random() < acc_prob:
                rho, cur = prop, new
                if it >= config.burn_in:
                    accepted += 1
        else:
            rng.random()  # keep the stream aligned across accept/reject branches
        if it < config.burn_in:
            log_step += (acc_prob - config.target_accept) / (it + 1) ** 0.6
        else:
            proposed += 1
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            out_sig2[keep] = sig2
            out_rho[keep] = rho
            out_idx[keep] = idx
            out_ll[keep] = cache.loglik(sig2, rho * rho, idx) if use_lik else 0.0
            keep += 1

    diagnostics = []
    rate = accepted / proposed if proposed else float("nan")
    if proposed and accepted == 0:
        msg = f"model {model_id}: all ratio proposals rejected after adaptation"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics.append(msg)
    chains = PosteriorChains(
        meas_var=out_sig2, ratio_sd=out_rho, phi_index=out_idx,
        phi=config.phi_grid[out_idx], loglik=out_ll, accept_ratio=rate,
        seed=seed if isinstance(seed, int) else None, model_id=model_id, warp=warp,
        proposal_sd=math.exp(log_step), diagnostics=diagnostics, cache=cache,
    )
    return chains


def _fit_job(args):
    s, warp, config, model_id, seed = args
    chains = fit_single(s, warp, config, model_id=model_id, seed=seed)
    chains.cache = None  # caches are rebuilt in the parent rather than pickled
    return chains


def fit_many(s, warps, config: FitConfig, jobs: int = 1, seed=None) -> list[PosteriorChains]:
    """Fit one chain per warp; model ``i`` is seeded by child ``i`` of the base seed.

    Results do not depend on ``jobs``.
    """
    base = config.seed if seed is None else seed
    children = np.random.SeedSequence(base).spawn(len(warps))
    seeds = [int(c.generate_state(1)[0]) for c in children]
    t, xy = _times_xy(s)
    tasks = [((t, xy), w, config, i, sd) for i, (w, sd) in enumerate(zip(warps, seeds))]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fits = list(pool.map(_fit_job, tasks))
        for f in fits:
            f.cache = precompute_phi_gram((t, xy), config, f.warp)
        return fits
    return [fit_single(*task[:2], task[2], model_id=task[3], seed=task[4]) for task in tasks]


@dataclass
class ScreenResult:
    warp: WarpSpec
    deviance: float
    rank: int


def deviance_screen(s, candidates, baseline: PosteriorChains, config: FitConfig,
                    top_k: int = 20) -> tuple[list[ScreenResult], float]:
    """Rank warps by deviance at the baseline posterior-mean parameters.

    Returns the ``top_k`` lowest-deviance candidates and the unwarped
    baseline deviance.
    """
    t, xy = _times_xy(s)
    pm = baseline.posterior_mean()
    params = MovementParams.from_ratio(pm["meas_var"], pm["ratio"], pm["phi"], tuple(xy[0]))
    kernel = config.kernel(pm["phi"])
    grid = config.grid
    # both routes are exact; pick the smaller factorization
    loglik = dense_loglik if len(t) <= grid.m else marginal_loglik

    def deviance(warp):
        return -2.0 * loglik(xy, build_basis(kernel, t, grid, warp), params)

    base_dev = deviance(None)
    devs = np.array([deviance(w) for w in candidates])
    order = np.argsort(devs, kind="stable")[:top_k]
    ranked = [ScreenResult(candidates[i], float(devs[i]), r) for r, i in enumerate(order)]
    return ranked, base_dev


def chains_manifest_json(chains: list[PosteriorChains], config: FitConfig) -> str:
    return json.dumps({"config": config.to_dict(),
                       "models": [c.manifest() for c in chains]}, indent=2, sort_keys=True)
