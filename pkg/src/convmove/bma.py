"""Two-stage Bayesian model averaging over warp candidates.

Every candidate shares the parameters ``(meas_var, ratio, phi)`` and differs
only in its fixed warp, so the common parameter space needs no mapping
between models.  The second stage is a Gibbs sampler over the model index:
draw a parameter vector from the current model's posterior sample, then
draw the index with probability proportional to each model's likelihood at
that vector times its prior probability.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .gp import TrajectoryDraws, predict_trajectory
from .mcmc import PosteriorChains
from .warp import tdcf_derivative

__all__ = [
    "WarpMixture",
    "posterior_model_probs",
    "model_averaged_predict",
    "averaged_warp_derivative",
]


@dataclass
class WarpMixture:
    models: list
    probs: np.ndarray
    prior_probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.prior_probs = np.asarray(self.prior_probs, dtype=float)
        if len(self.models) != len(self.probs):
            raise ValueError("one probability per model required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("model probabilities must be non-negative and sum to 1")

    def report(self) -> dict:
        return {
            "models": [
                {
                    "model_id": c.model_id,
                    "prob": float(p),
                    "prior_prob": float(q),
                    "warp": None if c.warp is None else c.warp.to_dict(),
                    "chain": c.summary(),
                }
                for c, p, q in zip(self.models, self.probs, self.prior_probs)
            ]
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2, sort_keys=True)


def _uniform(n):
    return np.full(n, 1.0 / n)


def posterior_model_probs(models: list[PosteriorChains], prior_probs=None,
                          second_stage_iterations: int = 10000, seed: int = 0) -> np.ndarray:
    """Posterior model probabilities as visit frequencies of the index chain.

    Each model must carry its likelihood cache (``chains.cache``); stored
    draws are re-evaluated under every model's warped basis.
    """
    L = len(models)
    if L == 0:
        raise ValueError("no models to average")
    lengths = {len(c) for c in models}
    if len(lengths) != 1:
        raise ValueError(f"chains must have equal post-burn-in length, got {sorted(lengths)}")
    if L == 1:
        return np.ones(1)
    prior = _uniform(L) if prior_probs is None else np.asarray(prior_probs, dtype=float)
    if prior.shape != (L,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
        raise ValueError("prior_probs must be a probability vector over the models")
    if any(c.cache is None for c in models):
        raise ValueError("every model needs its likelihood cache attached")
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    rng = np.random.default_rng(seed)
    S = lengths.pop()
    counts = np.zeros(L, dtype=np.int64)
    # a fixed start keeps the random stream aligned when zero-weight models are appended
    cur = 0
    for _ in range(second_stage_iterations):
        ch = models[cur]
        s = int(rng.integers(S))
        sig2, ratio, idx = ch.meas_var[s], ch.ratio[s], ch.phi_index[s]
        logw = np.array([m.cache.loglik(sig2, ratio, idx) for m in models]) + log_prior
        logw[~np.isfinite(logw)] = -np.inf
        w = np.exp(logw - np.max(logw))
        cdf = np.cumsum(w)
        cur = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), L - 1)
        counts[cur] += 1
    probs = counts / counts.sum()
    return probs / probs.sum()


def model_averaged_predict(mixture: WarpMixture, pred_times, D: int, seed: int = 0) -> TrajectoryDraws:
    """Draws from the model-averaged posterior predictive trajectory distribution.

    Draw counts per model are multinomial in the model probabilities; every
    draw uses a parameter vector sampled from that model's chain and that
    model's warped basis.
    """
    rng = np.random.default_rng(seed)
    t_pred = np.asarray(pred_times, dtype=float)
    counts = rng.multinomial(D, mixture.probs)
    blocks, prov = [], []
    for ch, k in zip(mixture.models, counts):
        if k == 0:
            continue
        cache = ch.cache
        picks = rng.integers(len(ch), size=k)
        # group repeated posterior indices so each basis is built once
        uniq, reps = np.unique(picks, return_counts=True)
        for s, r in zip(uniq, reps):
            idx = int(ch.phi_index[s])
            params = cache.params(ch.meas_var[s], ch.ratio[s], idx)
            phi = cache.phi_grid[idx]
            H_obs = cache.basis(phi)
            H_pred = cache.basis(phi, t_pred)
            draws = predict_trajectory(cache.xy, H_obs, H_pred, params, int(r),
                                       rng_seed=rng, model_id=ch.model_id)
            blocks.append(draws.draws)
            prov.append(np.full(int(r), ch.model_id))
    return TrajectoryDraws(t_pred, np.concatenate(blocks), np.concatenate(prov))


def averaged_warp_derivative(mixture: WarpMixture, t_grid, level: float = 0.95) -> dict:
    """Pointwise mixture of warp derivatives with a mixture-quantile band."""
    t = np.asarray(t_grid, dtype=float)
    curves = np.array([np.broadcast_to(tdcf_derivative(c.warp, t), t.shape) for c in mixture.models])
    p = mixture.probs
    avg = p @ curves
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    lower = np.empty_like(t)
    upper = np.empty_like(t)
    for i in range(len(t)):
        order = np.argsort(curves[:, i], kind="stable")
        cdf = np.cumsum(p[order])
        lower[i] = curves[order[min(np.searchsorted(cdf, lo_q), len(cdf) - 1)], i]
        upper[i] = curves[order[min(np.searchsorted(cdf, hi_q), len(cdf) - 1)], i]
    return {"t": t, "per_model": curves, "averaged": avg, "lower": lower, "upper": upper,
            "reference": np.ones_like(t)}


def write_warp_derivative_csv(path, curve: dict, models: list[PosteriorChains]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"model_{c.model_id}" for c in models]
                   + ["averaged", "lower", "upper", "reference"])
        for i, t in enumerate(curve["t"]):
            row = [f"{t:.12g}"] + [f"{v:.12g}" for v in curve["per_model"][:, i]]
            row += [f"{curve[k][i]:.12g}" for k in ("averaged", "lower", "upper", "reference")]
            w.writerow(row)
