import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from convmove.gp import (MovementParams, NumericalFailure, TrajectoryDraws, conditional_moments,
                         credible_circle_radius, dense_loglik, marginal_loglik, path_summaries,
                         predict_trajectory, process_covariance)
from convmove.kernels import KernelSpec, TimeGrid, build_basis
from convmove.telemetry import ProjectionMeta

INTEG = KernelSpec("gaussian-integrated", 0.01)


def mvn_oracle(s, H, p):
    """log density straight from scipy with the full 2n covariance."""
    Sigma = p.proc_var * H.delta * H.values @ H.values.T + p.meas_var * np.eye(len(s))
    return sum(stats.multivariate_normal(np.full(len(s), p.origin[c]), Sigma).logpdf(s[:, c])
               for c in range(2))


def instance(rng, n, m, family="gaussian-integrated"):
    grid = TimeGrid(0, 1, m)
    t = np.sort(rng.uniform(0, 1, n))
    phi = rng.uniform(0.002, 0.05)
    spec = KernelSpec(family, None if family == "brownian-indicator" else phi)
    H = build_basis(spec, t, grid)
    p = MovementParams(10 ** rng.uniform(-5, -1), 10 ** rng.uniform(-3, 1), phi,
                       tuple(rng.normal(size=2)))
    s = np.asarray(p.origin) + rng.normal(scale=0.3, size=(n, 2)).cumsum(axis=0) / math.sqrt(n)
    return s, H, p


def test_params_validation():
    with pytest.raises(ValueError):
        MovementParams(0.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        MovementParams(1.0, -1.0, 0.01)
    with pytest.raises(ValueError):
        MovementParams(1.0, 1.0, 0.0)
    p = MovementParams.from_ratio(2e-5, 400.0, 0.01)
    assert p.ratio == pytest.approx(400.0)
    assert p.proc_var == pytest.approx(8e-3)


def test_process_covariance_zero_and_psd(rng):
    g = TimeGrid(0, 1, 60)
    H = build_basis(INTEG, np.linspace(0, 1, 30), g)
    assert np.all(process_covariance(H, 0.0) == 0)
    C = process_covariance(H, 2.0)
    assert np.allclose(C, C.T)
    assert np.min(np.linalg.eigvalsh(C)) > -1e-10 * np.trace(C)


def test_brownian_covariance_is_min():
    g = TimeGrid(0, 1, 400)
    t = np.linspace(0.05, 1, 20)
    C = process_covariance(build_basis(KernelSpec("brownian-indicator"), t, g), 1.0)
    assert np.max(np.abs(C - np.minimum.outer(t, t))) <= 2 * g.delta


def test_single_point_no_process():
    s = np.array([[0.3, -0.2]])
    H = build_basis(INTEG, [0.5], TimeGrid(0, 1, 10))
    p = MovementParams(0.04, 0.0, 0.01, (0.1, 0.1))
    want = stats.norm(0.1, 0.2).logpdf(0.3) + stats.norm(0.1, 0.2).logpdf(-0.2)
    assert marginal_loglik(s, H, p) == pytest.approx(want, rel=1e-12)


def test_woodbury_matches_dense_example(rng):
    s, H, p = instance(rng, 50, 80)
    assert marginal_loglik(s, H, p) == pytest.approx(dense_loglik(s, H, p), rel=1e-8)
    assert dense_loglik(s, H, p) == pytest.approx(mvn_oracle(s, H, p), rel=1e-8)


@given(st.integers(1, 120), st.integers(2, 120), st.integers(0, 2**32 - 1),
       st.sampled_from(["gaussian-integrated", "gaussian", "brownian-indicator"]))
def test_woodbury_matches_dense(n, m, seed, family):
    s, H, p = instance(np.random.default_rng(seed), n, m, family)
    assert marginal_loglik(s, H, p) == pytest.approx(dense_loglik(s, H, p), rel=1e-8)


def test_permutation_invariance(rng):
    s, H, p = instance(rng, 40, 60)
    perm = rng.permutation(40)
    Hp = build_basis(INTEG, H.rows[perm], TimeGrid(0, 1, 60))
    Hp = type(H)(H.rows[perm], H.cols, H.values[perm], H.delta)
    assert marginal_loglik(s[perm], Hp, p) == pytest.approx(marginal_loglik(s, H, p), abs=1e-10)


def test_shape_mismatch():
    H = build_basis(INTEG, [0.1, 0.2], TimeGrid(0, 1, 10))
    with pytest.raises(ValueError):
        marginal_loglik(np.zeros((3, 2)), H, MovementParams(1e-3, 1.0, 0.01))


def test_nonfinite_raises_with_params():
    H = build_basis(INTEG, [0.1, 0.2], TimeGrid(0, 1, 10))
    s = np.array([[np.inf, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericalFailure) as exc:
        marginal_loglik(s, H, MovementParams(1e-3, 1.0, 0.01))
    assert exc.value.params["meas_var"] == 1e-3


def test_loglik_peaks_near_true_meas_var():
    from convmove.simulate import SimScenario, simulate_trajectory

    g = TimeGrid(0, 1, 200)
    t = np.linspace(0, 1, 150)
    res = simulate_trajectory(SimScenario(t, 1e-4, 0.05, 0.01, grid=g, seed=4))
    H = build_basis(INTEG, t, g)
    grid = np.array([1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
    ll = [marginal_loglik(res.obs, H, MovementParams(v, 0.05, 0.01)) for v in grid]
    k = int(np.argmax(ll))
    assert grid[k] in (1e-5, 1e-4, 1e-3)
    assert np.all(np.diff(ll[k:]) < 0) and np.all(np.diff(ll[:k + 1]) > 0)


def test_noiseless_interpolation():
    g = TimeGrid(0, 1, 100)
    t = np.linspace(0, 1, 25)
    H = build_basis(INTEG, t, g)
    # data drawn from the model itself lie in the span of the basis
    s = 0.1 * H.values @ np.random.default_rng(5).normal(size=(100, 2))
    p = MovementParams(1e-12, 1.0, 0.01)
    mean, _ = conditional_moments(s, H, build_basis(INTEG, t[5:8], g), p)
    assert np.max(np.abs(mean - s[5:8])) < 1e-6


def test_predictive_draws_match_moments():
    rng = np.random.default_rng(3)
    g = TimeGrid(0, 1, 80)
    t = np.sort(rng.uniform(0, 1, 30))
    s = rng.normal(scale=0.2, size=(30, 2)).cumsum(axis=0)
    p = MovementParams(1e-2, 0.5, 0.01, tuple(s[0]))
    Ho, Hp = build_basis(INTEG, t, g), build_basis(INTEG, np.linspace(0, 1, 6), g)
    mean, cov = conditional_moments(s, Ho, Hp, p)
    D = 2000
    dr = predict_trajectory(s, Ho, Hp, p, D, rng_seed=9)
    se = np.sqrt(np.diag(cov) / D)
    for c in range(2):
        assert np.all(np.abs(dr.draws[:, :, c].mean(axis=0) - mean[:, c]) < 3.5 * se + 1e-12)
        emp = np.cov(dr.draws[:, :, c], rowvar=False)
        # sd of a sample covariance entry: sqrt((C_ij^2 + C_ii C_jj) / D)
        se_c = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / D)
        assert np.all(np.abs(emp - cov) < 4 * se_c + 1e-12)


def test_predict_deterministic_and_zero_process():
    g = TimeGrid(0, 1, 40)
    t = np.linspace(0, 1, 10)
    s = np.random.default_rng(0).normal(size=(10, 2))
    Ho, Hp = build_basis(INTEG, t, g), build_basis(INTEG, [0.2, 0.7], g)
    p = MovementParams(1e-2, 0.5, 0.01, (0.0, 0.0))
    a = predict_trajectory(s, Ho, Hp, p, 50, rng_seed=1)
    b = predict_trajectory(s, Ho, Hp, p, 50, rng_seed=1)
    assert np.array_equal(a.draws, b.draws)
    z = predict_trajectory(s, Ho, Hp, MovementParams(1e-2, 0.0, 0.01, (1.0, 2.0)), 20, rng_seed=1)
    assert np.all(z.draws == np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        predict_trajectory(s, Ho, Hp, p, 0)


def test_conditional_variance_bumps_in_gaps():
    g = TimeGrid(0, 1, 200)
    t = np.concatenate([np.linspace(0, 0.4, 60), np.linspace(0.6, 1, 60)])
    s = np.zeros((len(t), 2))
    p = MovementParams(1e-4, 1.0, 0.005)
    tp = np.array([0.2, 0.3, 0.45, 0.5, 0.8])
    _, cov = conditional_moments(s, build_basis(INTEG, t, g), build_basis(INTEG, tp, g), p)
    v = np.diag(cov)
    assert v[0] <= p.meas_var and v[1] <= p.meas_var and v[4] <= p.meas_var
    assert v[3] > v[2] > v[1]


def test_path_summaries_examples():
    meta = ProjectionMeta(scale_km=1.0, time_span_hours=2.0)
    dr = TrajectoryDraws([0.0, 1.0], np.array([[[0.0, 0.0], [3.0, 4.0]]]))
    out = path_summaries(dr, meta)
    assert out["length_km"][0] == pytest.approx(5.0)
    assert out["speed_kmh"][0] == pytest.approx(2.5)
    one = path_summaries(TrajectoryDraws([0.5], np.ones((3, 1, 2))), meta)
    assert np.all(one["length_km"] == 0)
    with pytest.raises(ValueError):
        path_summaries(dr, None)


def test_path_summaries_constructed_fixture():
    rng = np.random.default_rng(2)
    steps = rng.normal(size=(4, 30, 2))
    pos = steps.cumsum(axis=1)
    want = np.sqrt((np.diff(pos, axis=1) ** 2).sum(axis=2)).sum(axis=1) * 7.5
    out = path_summaries(TrajectoryDraws(np.linspace(0, 1, 30), pos),
                         ProjectionMeta(scale_km=7.5, time_span_hours=10.0))
    assert np.max(np.abs(out["length_km"] - want)) < 1e-9
    assert out["length_mean"] == pytest.approx(want.mean())


def test_credible_radius_examples():
    same = TrajectoryDraws([0.0], np.ones((200, 1, 2)))
    assert credible_circle_radius(same, 0) == 0.0
    pts = np.random.default_rng(0).normal(size=(200000, 1, 2))
    r = credible_circle_radius(TrajectoryDraws([0.0], pts), 0, 0.95)
    assert r == pytest.approx(math.sqrt(stats.chi2.ppf(0.95, 2)), rel=0.01)
    assert r == pytest.approx(2.4477, rel=0.01)
    assert credible_circle_radius(TrajectoryDraws([0.0], pts[:500]), 0, 0.0) == 0.0
    with pytest.raises(ValueError):
        credible_circle_radius(TrajectoryDraws([0.0], pts[:99]), 0)


def test_draws_validation():
    with pytest.raises(ValueError):
        TrajectoryDraws([0.0, 1.0], np.zeros((2, 3, 2)))
    with pytest.raises(NumericalFailure):
        TrajectoryDraws([0.0], np.full((1, 1, 2), np.nan))
    dr = TrajectoryDraws([0.0, 1.0], np.arange(8.0).reshape(2, 2, 2))
    assert dr.flat().shape == (2, 4)
