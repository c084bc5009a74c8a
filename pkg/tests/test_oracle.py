import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from platevi.model import gre_model
from platevi.oracle import (
    GrePosterior,
    GreSpec,
    OracleDomainError,
    empirical_mean_elbo_baseline,
    gre_exact_posterior,
    gre_log_evidence,
)


def dense_joint_conditioning(x, spec):
    """Independent oracle: condition the dense joint Gaussian of all variables.

    Variables per dimension: [pop, group_1..G, x_11..x_GS].  Builds the full
    covariance from the generative recursion and applies the Schur complement.
    """
    g, s = spec.n_groups, spec.n_per_group
    n_lat = 1 + g
    n_all = n_lat + g * s
    cov = np.zeros((n_all, n_all))
    cov[0, 0] = spec.sigma_2**2
    for a in range(g):
        for b in range(g):
            cov[1 + a, 1 + b] = cov[0, 0] + (spec.sigma_1**2 if a == b else 0.0)
        cov[0, 1 + a] = cov[1 + a, 0] = cov[0, 0]
    for a in range(g):
        for i in range(s):
            row = n_lat + a * s + i
            cov[row, :n_lat] = cov[1 + a, :n_lat]
            cov[:n_lat, row] = cov[:n_lat, 1 + a]
    for a in range(g):
        for i in range(s):
            ra = n_lat + a * s + i
            for b in range(g):
                for j in range(s):
                    rb = n_lat + b * s + j
                    cov[ra, rb] = cov[1 + a, 1 + b] + (
                        spec.sigma_x**2 if (a == b and i == j) else 0.0
                    )
    sxx = cov[n_lat:, n_lat:]
    slx = cov[:n_lat, n_lat:]
    solve = np.linalg.solve(sxx, x.reshape(g * s, spec.dim))
    mean = slx @ solve
    cov_post = cov[:n_lat, :n_lat] - slx @ np.linalg.solve(sxx, slx.T)
    return mean, cov_post, sxx


def make_spec(g=3, s=4, dim=2, sx=0.8, s1=1.3, s2=0.6):
    return GreSpec(g, s, dim, sx, s1, s2)


def sample_data(spec, seed=0):
    graph = gre_model(spec.n_groups, spec.n_per_group, dim=spec.dim,
                      sigma_x=spec.sigma_x, sigma_1=spec.sigma_1, sigma_2=spec.sigma_2)
    _, x = graph.ground("full").sample_prior(np.random.default_rng(seed))
    return x["x"].reshape(spec.n_groups, spec.n_per_group, spec.dim)


def test_symmetric_zero_data():
    spec = GreSpec(1, 1, 1, 1.0, 1.0, 1.0)
    post = gre_exact_posterior(np.zeros((1, 1, 1)), spec)
    assert post.mean == pytest.approx(np.zeros((2, 1)))


def test_hand_conditioning_three_variable_chain():
    # x = 3 with unit scales: E[pop|x] = 1, E[group|x] = 2, variances 2/3
    spec = GreSpec(1, 1, 1, 1.0, 1.0, 1.0)
    post = gre_exact_posterior(np.full((1, 1, 1), 3.0), spec)
    assert post.mean[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert post.mean[1, 0] == pytest.approx(2.0, abs=1e-12)
    assert np.diag(post.cov) == pytest.approx([2 / 3, 2 / 3], abs=1e-12)


def test_posterior_matches_dense_solve():
    spec = make_spec()
    x = sample_data(spec, seed=3)
    post = gre_exact_posterior(x, spec)
    mean, cov, _ = dense_joint_conditioning(x, spec)
    np.testing.assert_allclose(post.mean, mean, atol=1e-8)
    np.testing.assert_allclose(post.cov, cov, atol=1e-8)


def test_log_evidence_simple_chain():
    spec = GreSpec(1, 1, 1, 1.0, 1.0, 1.0)
    lev = gre_log_evidence(np.zeros((1, 1, 1)), spec)
    assert lev == pytest.approx(-0.5 * math.log(2 * math.pi * 3.0), abs=1e-12)
    assert lev == pytest.approx(-1.46824, abs=1e-5)


def test_log_evidence_matches_dense_gaussian():
    spec = make_spec()
    x = sample_data(spec, seed=5)
    _, _, sxx = dense_joint_conditioning(x, spec)
    dense = sum(
        multivariate_normal(mean=np.zeros(sxx.shape[0]), cov=sxx).logpdf(
            x.reshape(-1, spec.dim)[:, d]
        )
        for d in range(spec.dim)
    )
    assert gre_log_evidence(x, spec) == pytest.approx(dense, abs=1e-8)


def test_log_evidence_separates_over_dimensions():
    spec = make_spec(dim=3)
    x = sample_data(spec, seed=7)
    total = gre_log_evidence(x, spec)
    per_dim = sum(
        gre_log_evidence(x[:, :, d : d + 1], make_spec(dim=1)) for d in range(3)
    )
    assert total == pytest.approx(per_dim, abs=1e-10)


def test_log_evidence_monte_carlo_check():
    # importance-free MC: log of the average likelihood over prior samples
    spec = GreSpec(2, 1, 1, 1.0, 1.0, 1.0)
    x = sample_data(spec, seed=9)
    rng = np.random.default_rng(0)
    n = 1_000_000
    pop = rng.standard_normal((n, 1)) * spec.sigma_2
    grp = pop + rng.standard_normal((n, 2)) * spec.sigma_1
    flat = x.reshape(2)
    loglik = (
        -0.5 * ((flat[None, :] - grp) ** 2) / spec.sigma_x**2
        - 0.5 * math.log(2 * math.pi * spec.sigma_x**2)
    ).sum(axis=1)
    mc = float(np.logaddexp.reduce(loglik) - math.log(n))
    assert gre_log_evidence(x, spec) == pytest.approx(mc, abs=0.05)


def test_baseline_is_a_lower_bound():
    for seed in range(5):
        spec = make_spec(g=4, s=6)
        x = sample_data(spec, seed=seed)
        assert empirical_mean_elbo_baseline(x, spec) <= gre_log_evidence(x, spec)


def test_baseline_tightens_in_decoupled_many_sample_limit():
    # wide group prior and many samples per group: the mean-field diagnostic
    # approaches the evidence within 1 percent on a generated instance
    spec = GreSpec(50, 200, 1, 1.0, 10.0, 1.0)
    x = sample_data(spec, seed=21)
    ev = gre_log_evidence(x, spec)
    base = empirical_mean_elbo_baseline(x, spec)
    assert base <= ev
    assert abs(base - ev) <= 0.01 * abs(ev)


def test_baseline_deterministic():
    spec = make_spec()
    x = sample_data(spec, seed=2)
    assert empirical_mean_elbo_baseline(x, spec) == empirical_mean_elbo_baseline(x, spec)


def test_singular_system_rejected():
    with pytest.raises(OracleDomainError):
        GreSpec(2, 2, 1, 0.0, 1.0, 1.0)


def test_spec_from_graph():
    graph = gre_model(5, 7, dim=3, sigma_x=0.5, sigma_1=1.5, sigma_2=2.5)
    spec = GreSpec.from_graph(graph)
    assert spec == GreSpec(5, 7, 3, 0.5, 1.5, 2.5)


def test_posterior_std_accessor():
    spec = make_spec()
    post = gre_exact_posterior(sample_data(spec, seed=1), spec)
    assert post.std.shape == (spec.n_groups + 1,)
    assert np.all(post.std > 0)
