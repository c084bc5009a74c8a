import math

import numpy as np
import pytest

from platevi import diffcore as dc
from platevi.distributions import LogNormal, Normal, make_distribution

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def test_standard_normal_at_mode():
    lp = Normal(0.0, 1.0).log_prob(np.array([0.0]))
    assert lp.data == pytest.approx(-0.9189385, abs=1e-6)


def test_standard_normal_at_one():
    lp = Normal(0.0, 1.0).log_prob(np.array([1.0]))
    assert lp.data == pytest.approx(-1.4189385, abs=1e-6)


def test_lognormal_at_one():
    # hand change-of-variables: log(1) = 0, Jacobian term vanishes
    lp = LogNormal(0.0, 1.0).log_prob(np.array([1.0]))
    assert lp.data == pytest.approx(-0.9189385, abs=1e-6)


def test_lognormal_change_of_variables_by_hand():
    v = 2.5
    expected = -HALF_LOG_2PI - 0.5 * math.log(v) ** 2 - math.log(v)
    lp = LogNormal(0.0, 1.0).log_prob(np.array([v]))
    assert lp.data == pytest.approx(expected, abs=1e-12)


def test_rsample_zero_noise_returns_loc():
    out = Normal(np.array([1.5]), np.array([2.0])).rsample(np.array([0.0]))
    assert out.data == pytest.approx(1.5)


def test_rsample_arithmetic():
    out = Normal(np.array([2.0]), np.array([3.0])).rsample(np.array([1.0]))
    assert out.data == pytest.approx(5.0)


def test_rsample_pathwise_derivative_wrt_scale():
    scale = dc.Parameter("scale", np.array([3.0]))
    tape = dc.Tape()
    out = Normal(dc.constant([2.0]), tape.watch(scale)).rsample(np.array([1.0]))
    g = tape.backward(dc.array_sum(out))["scale"]
    assert g == pytest.approx(1.0)


def test_rsample_pathwise_derivative_lognormal():
    # d/dscale exp(loc + scale*e) = e * exp(loc + scale*e); checked vs central differences
    loc, sc, e = 0.3, 0.7, 1.3
    p = dc.Parameter("s", np.array([sc]))
    tape = dc.Tape()
    out = LogNormal(dc.constant([loc]), tape.watch(p)).rsample(np.array([e]))
    g = tape.backward(dc.array_sum(out))["s"]
    h = 1e-6
    fd = (math.exp(loc + (sc + h) * e) - math.exp(loc + (sc - h) * e)) / (2 * h)
    assert g == pytest.approx(fd, rel=1e-6)


def test_event_dim_summation():
    lp = Normal(0.0, 1.0).log_prob(np.zeros((4, 3)))
    assert lp.data.shape == (4,)
    np.testing.assert_allclose(lp.data, -3 * 0.9189385, atol=1e-5)


def test_rsample_moments_match():
    rng = np.random.default_rng(11)
    n = 100_000
    loc, scale = 0.7, 1.9
    draws = Normal(loc, scale).rsample(rng.standard_normal((n, 1))).data
    se_mean = scale / math.sqrt(n)
    assert abs(draws.mean() - loc) < 3 * se_mean
    # SE of sample variance of a normal: scale^2 * sqrt(2/(n-1))
    se_var = scale**2 * math.sqrt(2.0 / (n - 1))
    assert abs(draws.var() - scale**2) < 3 * se_var


@pytest.mark.parametrize("loc,scale", [(0.0, 1.0), (0.8, 0.5), (-1.2, 2.3)])
def test_normal_log_prob_integrates_to_one(loc, scale):
    # trapezoid quadrature over [-10 sigma, 10 sigma]
    grid = np.linspace(loc - 10 * scale, loc + 10 * scale, 200_001)
    lp = Normal(loc, scale).log_prob(grid[:, None]).data
    total = np.trapz(np.exp(lp), grid)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_lognormal_log_prob_integrates_to_one():
    grid = np.linspace(1e-9, 60.0, 400_001)
    lp = LogNormal(0.0, 1.0).log_prob(grid[:, None]).data
    total = np.trapz(np.exp(lp), grid)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_scale_must_be_positive():
    with pytest.raises(dc.DomainError):
        Normal(0.0, np.array([0.0]))


def test_lognormal_rejects_non_positive_values():
    with pytest.raises(dc.DomainError):
        LogNormal(0.0, 1.0).log_prob(np.array([-0.5]))


def test_make_distribution_dispatch():
    assert isinstance(make_distribution("normal", 0.0, 1.0), Normal)
    assert isinstance(make_distribution("lognormal", 0.0, 1.0), LogNormal)
    with pytest.raises(ValueError):
        make_distribution("categorical", 0.0, 1.0)
