import math

import numpy as np
import pytest
from scipy import integrate, stats

from isal_fragility.model import FragilityParams, fragility_prob
from isal_fragility.sampling import (
    AnalyticGaussian,
    DefensiveDensity,
    DegeneratePoolWarning,
    PoolEmpirical,
    defensive_weights,
    draw,
    optimal_weight,
)

THETA = FragilityParams(0.3, 0.4)


def test_optimal_weight_values():
    assert optimal_weight(THETA, -1e3) == 0.0
    assert optimal_weight(THETA, math.log(0.3)) == pytest.approx(0.25)
    f = fragility_prob(THETA, -1.0)
    assert optimal_weight(THETA, -1.0) == pytest.approx(math.sqrt(f * (1 - f) ** 4 + (1 - f) * f**4))


def test_plain_importance_weights_on_three_points():
    d = defensive_weights(np.array([-1e3, math.log(0.3), math.log(0.3)]), THETA, 0.0)
    np.testing.assert_allclose(d.weights, [0.0, 0.5, 0.5])


def test_epsilon_one_is_the_marginal():
    x = np.random.default_rng(1).normal(-2.8, 1.3, 500)
    d = defensive_weights(x, THETA, 1.0)
    np.testing.assert_allclose(d.weights, 1 / 500)
    assert np.all(d.likelihood_ratios == 1.0)


@pytest.mark.parametrize("eps", [1e-3, 0.1, 0.5])
def test_mixture_normalisation_and_identity(eps):
    rng = np.random.default_rng(2)
    x = rng.normal(-2.8, 1.3, 2000)
    for _ in range(20):
        th = FragilityParams(math.exp(rng.uniform(-5, 2)), rng.uniform(0.05, 2))
        d = defensive_weights(x, th, eps)
        assert d.weights.sum() == pytest.approx(1.0, abs=1e-12)
        # sum_i q_i * (p_i / q_i) = sum_i p_i
        assert np.sum(d.weights * d.likelihood_ratios) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("eps", [1e-3, 1e-1])
def test_ratio_bounded_by_inverse_epsilon(eps):
    rng = np.random.default_rng(3)
    x = rng.normal(-2.8, 1.3, 5000)
    for _ in range(100):
        th = FragilityParams(math.exp(rng.uniform(math.log(1e-3), math.log(1e2))), rng.uniform(0.05, 2))
        d = defensive_weights(x, th, eps)
        assert d.likelihood_ratios.max() < 1 / eps


def test_single_point_pool():
    d = defensive_weights(np.array([0.2]), THETA, 1e-3)
    rec = draw(d, np.random.default_rng(0))
    assert rec.index == 0 and rec.likelihood_ratio == pytest.approx(1.0)


def test_draw_frequencies():
    m = PoolEmpirical(np.array([0.0, 1.0, 2.0]))
    w = np.array([0.2, 0.3, 0.5])
    d = DefensiveDensity(THETA, 0.5, m, 1.0, 0.0, w, 1 / (3 * w))
    rng = np.random.default_rng(4)
    counts = np.bincount([draw(d, rng).index for _ in range(100_000)], minlength=3)
    # chi-square goodness of fit at the 0.1% level
    assert stats.chisquare(counts, 100_000 * w).pvalue > 1e-3


def test_draws_are_deterministic():
    x = np.random.default_rng(5).normal(-2.8, 1.3, 1000)
    d = defensive_weights(x, THETA, 1e-3)
    a = [draw(d, np.random.default_rng(42)).index for _ in range(5)]
    b = [draw(d, np.random.default_rng(42)).index for _ in range(5)]
    assert a == b


def test_importance_identity_on_pool():
    rng = np.random.default_rng(6)
    x = rng.normal(-2.8, 1.3, 3000)
    d = defensive_weights(x, THETA, 0.05)
    recs = [draw(d, rng) for _ in range(100_000)]
    h = np.sin(np.array([r.x for r in recs]))
    vals = h * np.array([r.likelihood_ratio for r in recs])
    assert abs(vals.mean() - np.sin(x).mean()) < 3 * vals.std() / math.sqrt(vals.size)


def test_analytic_density_integrates_to_one():
    m = AnalyticGaussian(math.log(0.06), 1.69)
    d = defensive_weights(None, THETA, 1e-3, m)
    total, _ = integrate.quad(lambda t: m.pdf(t) / d.ratio(t), m.mean - 10 * m.std, m.mean + 10 * m.std,
                              limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)
    assert max(d.ratio(t) for t in np.linspace(-8, 2, 200)) < 1e3


def test_analytic_draws_follow_q():
    m = AnalyticGaussian(math.log(0.06), 1.69)
    d = defensive_weights(None, THETA, 0.1, m)
    rng = np.random.default_rng(7)
    recs = [draw(d, rng) for _ in range(20_000)]
    assert all(r.index is None for r in recs)
    # the mean of p/q under q is one
    r = np.array([r.likelihood_ratio for r in recs])
    assert abs(r.mean() - 1.0) < 3 * r.std() / math.sqrt(r.size)


def test_flat_pool_falls_back_to_marginal():
    with pytest.warns(DegeneratePoolWarning):
        d = defensive_weights(np.array([-1000.0, -1001.0]), THETA, 1e-3)
    assert d.degenerate
    np.testing.assert_allclose(d.weights, 0.5)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        defensive_weights(np.array([0.0]), THETA, 1.5)
    with pytest.raises(ValueError):
        PoolEmpirical(np.array([]))
    with pytest.raises(ValueError):
        PoolEmpirical(np.array([np.nan]))
    with pytest.raises(ValueError):
        AnalyticGaussian(0.0, 0.0)
