import math

import numpy as np
import pytest
from hypothesis import example, given, strategies as st
from scipy import integrate

from convmove.warp import (DEFAULT_WARP_MAGNITUDES, DEFAULT_WARP_SCALES, WarpSpec,
                           enumerate_warp_candidates, tdcf, tdcf_derivative,
                           truncated_gaussian_cdf, truncated_gaussian_density)


def quad_density(spec, t):
    """Gaussian normalized by quadrature over the window."""
    g = lambda x: math.exp(-(x - spec.center) ** 2 / spec.scale)  # noqa: E731
    z, _ = integrate.quad(g, spec.t_start, spec.t_end, epsabs=1e-14, epsrel=1e-13)
    return g(t) / z


def quad_cdf(spec, t):
    num, _ = integrate.quad(lambda x: quad_density(spec, x), spec.t_start, t,
                            epsabs=1e-14, epsrel=1e-12)
    return num


specs = st.builds(
    lambda a, b, c, s, m: WarpSpec(a + c * (b - a), s, m, a, b) if b > a else WarpSpec(0.5, s, m),
    st.floats(-2.0, 2.0), st.floats(-1.0, 3.0), st.floats(0.0, 1.0),
    st.floats(1e-4, 10.0), st.floats(0.0, 5.0),
).filter(lambda w: w.span > 1e-3)


def test_spec_validation():
    with pytest.raises(ValueError):
        WarpSpec(0.5, 0.0, 0.7)
    with pytest.raises(ValueError):
        WarpSpec(0.5, 0.03, -0.1)
    with pytest.raises(ValueError):
        WarpSpec(1.5, 0.03, 0.7)


def test_density_flat_limit():
    f = truncated_gaussian_density(WarpSpec(0.5, 1e6, 0.7), np.linspace(0, 1, 11))
    assert np.allclose(f, 1.0, atol=1e-6)


def test_density_normalized():
    spec = WarpSpec(0.3, 0.01, 0.7)
    total, _ = integrate.quad(lambda x: truncated_gaussian_density(spec, x), 0, 1,
                              epsabs=1e-14, epsrel=1e-13, points=[0.3])
    assert abs(total - 1.0) < 1e-8


def test_density_quadrature_oracle():
    spec = WarpSpec(0.5, 0.04, 0.7)
    assert truncated_gaussian_density(spec, 0.5) == pytest.approx(quad_density(spec, 0.5), rel=1e-10)


def test_domain_check():
    spec = WarpSpec(0.5, 0.04, 0.7)
    with pytest.raises(ValueError):
        truncated_gaussian_density(spec, 1.1)
    with pytest.raises(ValueError):
        tdcf(spec, -0.2)


def test_cdf_quadrature_oracle():
    spec = WarpSpec(0.35, 0.02, 0.7)
    for t in (0.1, 0.35, 0.6, 0.9):
        assert truncated_gaussian_cdf(spec, t) == pytest.approx(quad_cdf(spec, t), abs=1e-10)


def test_identity_cases():
    t = np.random.default_rng(1).uniform(0, 1, 500)
    assert np.max(np.abs(tdcf(WarpSpec(0.3, 0.02, 0.0), t) - t)) <= 1e-12
    assert np.max(np.abs(tdcf(WarpSpec(0.3, math.inf, 0.7), t) - t)) <= 1e-12
    assert np.max(np.abs(tdcf(None, t) - t)) == 0.0
    assert np.all(tdcf_derivative(WarpSpec(0.3, 0.02, 0.0), t) == 1.0)


def test_tdcf_quadrature_oracle():
    spec = WarpSpec(0.5, 0.04, 0.7)
    want = (0.7 * quad_cdf(spec, 0.5) + 0.5) / 1.7
    assert tdcf(spec, 0.5) == pytest.approx(want, abs=1e-10)
    assert tdcf(spec, 0.5) == pytest.approx(0.5, abs=1e-12)   # symmetric window


def test_derivative_integrates_to_one():
    spec = WarpSpec(0.2, 0.015, 0.8)
    total, _ = integrate.quad(lambda x: tdcf_derivative(spec, x), 0, 1, points=[0.2],
                              epsabs=1e-13, epsrel=1e-12)
    assert total == pytest.approx(1.0, abs=1e-9)


@given(specs)
@example(WarpSpec(1.0, 1.0, 3.0, 1.0, 1.5959457658497267))
def test_endpoints_and_non_folding(spec):
    assert tdcf(spec, spec.t_start) == 0.0
    assert tdcf(spec, spec.t_end) == 1.0
    t = np.linspace(spec.t_start, spec.t_end, 2001)
    w = tdcf(spec, t)
    assert np.all(np.diff(w) >= 0)
    floor = 1.0 / (spec.magnitude + spec.span)
    assert np.all(tdcf_derivative(spec, t) >= floor * (1 - 1e-12))


@given(specs, st.integers(0, 2**32 - 1))
def test_derivative_matches_finite_difference(spec, seed):
    h = 1e-6 * spec.span
    t = np.random.default_rng(seed).uniform(spec.t_start + h, spec.t_end - h, 100)
    fd = (tdcf(spec, t + h) - tdcf(spec, t - h)) / (2 * h)
    assert np.max(np.abs(fd - tdcf_derivative(spec, t))) < 1e-5 * max(1.0, np.max(np.abs(fd)))


@given(st.floats(0.05, 0.95), st.floats(0.005, 0.2), st.floats(0.1, 3.0))
def test_expansion_iff_density_above_one(c, s, m):
    spec = WarpSpec(c, s, m)
    t = np.linspace(0, 1, 401)
    f = truncated_gaussian_density(spec, t)
    d = tdcf_derivative(spec, t)
    away = np.abs(f - 1.0) > 1e-9
    assert np.array_equal((d > 1)[away], (f > 1)[away])


def test_candidates_default_grid():
    cands = enumerate_warp_candidates(100)
    assert len(cands) == 10000
    assert min(DEFAULT_WARP_SCALES) == pytest.approx(0.01)
    assert max(DEFAULT_WARP_SCALES) == pytest.approx(0.0625)
    assert min(DEFAULT_WARP_MAGNITUDES) == pytest.approx(0.6)
    assert max(DEFAULT_WARP_MAGNITUDES) == pytest.approx(0.8)


def test_candidates_centers():
    cands = enumerate_warp_candidates(7, [0.02], [0.7])
    centers = np.array([w.center for w in cands])
    assert np.all((centers > 0) & (centers < 1))
    assert np.allclose(np.diff(centers), centers[0])
    assert enumerate_warp_candidates(1, [0.02], [0.7]) == [WarpSpec(0.5, 0.02, 0.7)]


@pytest.mark.parametrize("args", [(0, [0.02], [0.7]), (3, [], [0.7]), (3, [0.02], [])])
def test_candidates_reject_empty(args):
    with pytest.raises(ValueError):
        enumerate_warp_candidates(*args)
