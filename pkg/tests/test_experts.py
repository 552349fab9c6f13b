from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaln

from mixed_lrmoe import (
    ExpertFamily,
    Gamma,
    InvalidArgumentError,
    InvalidConfigurationError,
    LogNormal,
    SupportWarning,
    ZILogNormal,
    expert_logpdf,
    expert_mean,
)
from oracles import expert_logpdf_ref


def test_standard_lognormal_density_at_one():
    assert expert_logpdf(LogNormal(0.0, 1.0), 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert expert_logpdf(LogNormal(0.0, 1.0), 1.0) == pytest.approx(-0.9189, abs=1e-4)


def test_zero_inflated_atom():
    assert expert_logpdf(ZILogNormal(0.3, 1.5, 0.7), 0.0) == pytest.approx(math.log(0.3), abs=1e-15)


def test_gamma_at_zero_is_flagged():
    with pytest.warns(SupportWarning):
        assert expert_logpdf(Gamma(1.0, 2.0), 0.0) == -np.inf


def test_negative_response_flagged_for_zero_inflated():
    with pytest.warns(SupportWarning):
        out = expert_logpdf(ZILogNormal(0.2, 0.0, 1.0), np.array([-1.0, 0.0, 1.0]))
    assert out[0] == -np.inf and np.all(np.isfinite(out[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_logpdf_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    y = np.concatenate([[0.0], rng.gamma(2.0, 3.0, 50)])
    for e in (Gamma(rng.uniform(0.3, 8), rng.uniform(0.1, 5)),
              LogNormal(rng.normal(), rng.uniform(0.2, 2)),
              ZILogNormal(rng.uniform(0.05, 0.95), rng.normal(), rng.uniform(0.2, 2))):
        with np.errstate(divide="ignore"):
            np.testing.assert_allclose(e.logpdf(y[1:]), expert_logpdf_ref(e, y[1:]), rtol=1e-12, atol=1e-12)
    zi = ZILogNormal(0.4, 0.0, 1.0)
    assert zi.logpdf(0.0) == expert_logpdf_ref(zi, 0.0)


def test_means():
    assert expert_mean(Gamma(2.0, 3.0)) == 6.0
    assert expert_mean(ZILogNormal(1.0, 2.0, 0.5)) == 0.0
    assert expert_mean(LogNormal(0.0, 1.0)) == pytest.approx(math.exp(0.5), rel=1e-15)
    assert expert_mean(ZILogNormal(0.25, 1.0, 0.5)) == pytest.approx(0.75 * math.exp(1.125), rel=1e-15)


def test_lognormal_mean_by_monte_carlo():
    draws = LogNormal(0.0, 1.0).rvs(np.random.default_rng(1), 1_000_000)
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - math.exp(0.5)) < 3 * se
    assert math.exp(0.5) == pytest.approx(1.6487, abs=1e-4)


@pytest.mark.parametrize("seed", range(8))
def test_densities_integrate_to_one(seed):
    rng = np.random.default_rng(100 + seed)
    g = Gamma(rng.uniform(0.5, 10), rng.uniform(0.2, 5))
    ln = LogNormal(rng.normal(0, 2), rng.uniform(0.2, 2))
    zi = ZILogNormal(rng.uniform(0, 1), rng.normal(0, 2), rng.uniform(0.2, 2))
    for e in (g, ln):
        total = integrate.quad(lambda y: math.exp(e.logpdf(y)), 0, np.inf, epsabs=1e-12, limit=500)[0]
        assert abs(total - 1.0) < 1e-6
    pos = integrate.quad(lambda y: math.exp(zi.logpdf(y)), 0, np.inf, epsabs=1e-12, limit=500)[0]
    assert abs(zi.zeroprob + pos - 1.0) < 1e-6


def test_cdf_matches_integrated_density():
    for e in (Gamma(2.5, 1.3), LogNormal(0.3, 0.8)):
        for y in (0.5, 2.0, 7.0):
            ref = integrate.quad(lambda t: math.exp(e.logpdf(t)), 0, y, epsabs=1e-13)[0]
            assert float(e.cdf(y)) == pytest.approx(ref, abs=1e-9)
    zi = ZILogNormal(0.3, 0.0, 1.0)
    assert float(zi.cdf(0.0)) == pytest.approx(0.3)
    assert float(zi.cdf(-1.0)) == 0.0


@pytest.mark.parametrize("bad", [
    lambda: Gamma(0.0, 1.0),
    lambda: Gamma(1.0, -2.0),
    lambda: Gamma(float("nan"), 1.0),
    lambda: LogNormal(0.0, 0.0),
    lambda: LogNormal(float("inf"), 1.0),
    lambda: ZILogNormal(1.2, 0.0, 1.0),
    lambda: ZILogNormal(0.5, 0.0, -1.0),
])
def test_invalid_parameters_rejected(bad):
    with pytest.raises(InvalidArgumentError):
        bad()


def test_dict_round_trip():
    for e in (Gamma(2.0, 0.1 + 0.2), LogNormal(-1 / 3, 0.7), ZILogNormal(0.123456789, 7.5, 1e-3)):
        assert ExpertFamily.from_dict(e.to_dict()) == e
    with pytest.raises(InvalidArgumentError):
        ExpertFamily.from_dict({"family": "weibull", "k": 1.0})


def test_lognormal_weighted_mle_closed_form():
    y = np.random.default_rng(3).lognormal(1.0, 0.5, 200)
    e = LogNormal.fit_weighted(y, np.ones_like(y))
    assert e.meanlog == pytest.approx(np.mean(np.log(y)), rel=1e-13)
    assert e.sdlog ** 2 == pytest.approx(np.var(np.log(y)), rel=1e-12)


def test_zero_inflated_weighted_zero_fraction():
    rng = np.random.default_rng(4)
    y = rng.lognormal(0.0, 1.0, 100)
    y[:30] = 0.0
    e = ZILogNormal.fit_weighted(y, np.ones_like(y))
    assert e.zeroprob == 0.3
    pos = LogNormal.fit_weighted(y[30:], np.ones(70))
    assert (e.meanlog, e.sdlog) == (pos.meanlog, pos.sdlog)


def _weighted_gamma_ll(k, th, y, w):
    return np.sum(w * ((k - 1) * np.log(y) - y / th - k * np.log(th) - gammaln(k)), axis=-1)


def test_weighted_gamma_mle_matches_grid_search():
    y = np.array([0.7, 1.9, 2.4, 3.8, 6.1])
    w = np.array([0.2, 1.0, 0.5, 0.9, 0.3])
    fitted = Gamma.fit_weighted(y, w)

    # successive zooming grid over (shape, scale)
    k_lo, k_hi, t_lo, t_hi = 0.1, 20.0, 0.05, 20.0
    for _ in range(14):
        K, T = np.meshgrid(np.linspace(k_lo, k_hi, 201), np.linspace(t_lo, t_hi, 201), indexing="ij")
        ll = _weighted_gamma_ll(K[..., None], T[..., None], y, w)
        a, b = np.unravel_index(np.argmax(ll), ll.shape)
        k0, t0 = K[a, b], T[a, b]
        dk, dt = (k_hi - k_lo) / 20, (t_hi - t_lo) / 20
        k_lo, k_hi = max(k0 - dk, 1e-6), k0 + dk
        t_lo, t_hi = max(t0 - dt, 1e-6), t0 + dt
    assert fitted.shape == pytest.approx(k0, abs=1e-4)
    assert fitted.scale == pytest.approx(t0, abs=1e-4)


def test_gamma_mle_on_constant_sample_caps_shape():
    e = Gamma.fit_weighted(np.full(5, 2.0), np.ones(5))
    assert e.mean() == pytest.approx(2.0) and e.shape >= 1e7


def test_gamma_fit_without_positive_responses():
    with pytest.raises(InvalidConfigurationError):
        Gamma.fit_weighted(np.zeros(4), np.ones(4))
    with pytest.raises(InvalidConfigurationError):
        Gamma.method_of_moments(np.zeros(4))


def test_method_of_moments_reproduces_sample_moments():
    y = np.random.default_rng(9).gamma(3.0, 2.0, 500)
    g = Gamma.method_of_moments(y)
    assert g.mean() == pytest.approx(y.mean(), rel=1e-12)
    assert g.shape * g.scale ** 2 == pytest.approx(y.var(), rel=1e-12)
    ln = LogNormal.method_of_moments(y)
    assert ln.mean() == pytest.approx(y.mean(), rel=1e-12)


def test_sampling_matches_means():
    rng = np.random.default_rng(5)
    for e in (Gamma(2.0, 3.0), ZILogNormal(0.4, 0.5, 0.5)):
        d = e.rvs(rng, 400_000)
        assert abs(d.mean() - e.mean()) < 4 * d.std() / math.sqrt(d.size)
    d = ZILogNormal(0.4, 0.5, 0.5).rvs(rng, 200_000)
    assert abs(np.mean(d == 0) - 0.4) < 4 * math.sqrt(0.24 / d.size)
