import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from diffflow.targets import (GaussianMixture, SmoothedScaledTarget, bimodal_1d, fixture_mixtures,
                              growth_bound_constants, offset_pair_2d, quantile_radius, smoothed_log_density,
                              smoothed_score, standard_normal)


def test_standard_normal_at_origin():
    t = SmoothedScaledTarget(standard_normal(1))
    assert t.log_density(np.zeros(1)) == pytest.approx(-0.9189385332046727, abs=1e-15)


def test_smoothing_adds_variance():
    t = SmoothedScaledTarget(standard_normal(1), 1.0, 3.0)
    assert t.log_density(np.array([2.0])) == pytest.approx(stats.norm(0, 2).logpdf(2.0), rel=1e-14)


def test_mixture_matches_convolution_quadrature():
    base = bimodal_1d()
    u, s = 1.5, 0.4
    y = np.linspace(-12, 12, 200_001)
    # density of X/u at y is u q(u y)
    qy = u * np.exp(SmoothedScaledTarget(base).log_density((u * y)[:, None]))
    t = SmoothedScaledTarget(base, u, s)
    for z in (-2.0, -0.3, 0.0, 0.8, 3.1):
        integrand = qy * stats.norm(0, math.sqrt(s)).pdf(z - y)
        expected = math.log(np.trapezoid(integrand, y))
        assert t.log_density(np.array([z])) == pytest.approx(expected, abs=1e-8)


def test_density_integrates_to_one():
    x = np.linspace(-15, 15, 30_001)
    p = np.exp(SmoothedScaledTarget(bimodal_1d(), 0.7, 0.2).log_density(x[:, None]))
    assert np.trapezoid(p, x) == pytest.approx(1.0, abs=1e-9)
    g = np.linspace(-10, 12, 801)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    p2 = np.exp(SmoothedScaledTarget(offset_pair_2d(), 1.2, 0.5).log_density(pts)).reshape(X.shape)
    assert np.trapezoid(np.trapezoid(p2, g, axis=1), g) == pytest.approx(1.0, abs=1e-8)


def test_score_examples():
    t = SmoothedScaledTarget(standard_normal(1))
    x = np.array([[-1.5], [0.0], [2.0]])
    np.testing.assert_allclose(t.score(x), -x)
    m = GaussianMixture(np.array([1.0, 0.0]), np.array([[1.0, 2.0], [5.0, 5.0]]), np.array([0.5, 1.0]))
    np.testing.assert_allclose(SmoothedScaledTarget(m).score(np.array([1.0, 2.0])), 0.0, atol=1e-15)


@given(st.sampled_from(sorted(fixture_mixtures())), st.floats(0.3, 3.0), st.floats(0.0, 2.0),
       st.integers(0, 2**31))
def test_score_matches_finite_difference(name, u, s, seed):
    target = SmoothedScaledTarget(fixture_mixtures()[name], u, s)
    rng = np.random.default_rng(seed)
    k = target.base.dim
    x = rng.normal(scale=2.0, size=k)
    h = 1e-5
    fd = np.array([(target.log_density(x + h * e) - target.log_density(x - h * e)) / (2 * h) for e in np.eye(k)])
    sc = smoothed_score(target, x)
    assert np.linalg.norm(sc - fd) <= 1e-6 * max(np.linalg.norm(sc), 1.0)


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.3, 3.0))
def test_smoothing_composes(v1, v2, u):
    base = bimodal_1d()
    x = np.linspace(-6, 6, 41)[:, None]
    once = SmoothedScaledTarget(base, u, v1 + v2).log_density(x)
    # smoothing the already-smoothed mixture again by v2
    mu, var = SmoothedScaledTarget(base, u, v1).components()
    twice = SmoothedScaledTarget(GaussianMixture(base.weights, mu, var), 1.0, v2).log_density(x)
    np.testing.assert_allclose(twice, once, atol=1e-10)


def test_score_is_batch_independent(rng):
    t = SmoothedScaledTarget(offset_pair_2d(), 1.1, 0.3)
    x = rng.normal(size=(30, 2))
    full = t.score(x)
    for i in (0, 7, 29):
        np.testing.assert_array_equal(t.score(x[i]), full[i])
    assert smoothed_log_density(t, x).shape == (30,)


def test_quantile_radius_oracles():
    assert quantile_radius(standard_normal(1), 0.95, n_mc=1_000_000) == pytest.approx(
        stats.norm.ppf(0.975), abs=0.02)
    assert quantile_radius(standard_normal(2), 0.95, n_mc=1_000_000) == pytest.approx(
        math.sqrt(stats.chi2.ppf(0.95, 2)), abs=0.02)
    spike = GaussianMixture.single(np.zeros(1), 1e-12)
    assert quantile_radius(spike, 0.5) < 1e-5


def test_quantile_radius_rejects_bad_inputs():
    with pytest.raises(ValueError):
        quantile_radius(standard_normal(1), 1.0)
    with pytest.raises(ValueError):
        quantile_radius(standard_normal(1), 0.5, n_mc=10)


def test_growth_constants():
    for m in fixture_mixtures().values():
        assert growth_bound_constants(m, 1.0, 0.95, n_mc=20_000).A == 0.5
    b = growth_bound_constants(standard_normal(1), 1.0, 0.95, n_mc=1_000_000)
    assert b.B == pytest.approx(1.96, abs=0.02)
    with pytest.raises(ValueError):
        growth_bound_constants(standard_normal(1), 0.0, 0.95)


@pytest.mark.parametrize("name", sorted(fixture_mixtures()))
@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0, 2.0])
def test_growth_bound_holds_on_grid(name, sigma):
    m = fixture_mixtures()[name]
    bound = growth_bound_constants(m, sigma, 0.95, n_mc=50_000)
    k = m.dim
    n_side = 10_000 if k == 1 else 100
    g = np.linspace(-10, 10, n_side)
    x = g[:, None] if k == 1 else np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    logq = SmoothedScaledTarget(m, 1.0, sigma * sigma).log_density(x)
    assert np.all(np.abs(logq) <= bound(x))


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.5, 0.4]), np.zeros((2, 1)), np.ones(2))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 1)), np.array([0.0]))
    with pytest.raises(ValueError):
        SmoothedScaledTarget(standard_normal(1), 0.0, 1.0)


def test_mixture_config_round_trip():
    m = offset_pair_2d()
    m2 = GaussianMixture.from_config(m.to_config())
    np.testing.assert_array_equal(m2.means, m.means)
    np.testing.assert_array_equal(m2.variances, m.variances)
