import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from platevi.estimator import PAVI, check_observed_data
from platevi.model import gre_model
from platevi.oracle import GreSpec, gre_exact_posterior


def small_graph():
    return gre_model(4, 6, reduced_groups=2, dim=1)


def make_data(graph, seed=0):
    _, x = graph.ground("full").sample_prior(np.random.default_rng(seed))
    return x


def test_get_params_roundtrip_and_clone():
    est = PAVI(model="gre", encoding_size=4, max_steps=10)
    params = est.get_params()
    assert params["encoding_size"] == 4
    twin = clone(est)
    assert twin.get_params() == params


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        PAVI().sample_posterior(2)


def test_fit_sample_and_score():
    graph = small_graph()
    x = make_data(graph)
    est = PAVI(model=graph, scheme="pavi-f", flow="affine", encoding_size=4,
               max_steps=400, learning_rate=0.02, seed=1, plateau_window=10_000)
    est.fit(x)
    draws = est.sample_posterior(50, seed=2)
    assert draws["pop_mean"].shape == (50, 1, 1)
    assert draws["group_mean"].shape == (50, 4, 1)
    assert np.isfinite(est.score())


def test_posterior_mean_tracks_oracle():
    graph = small_graph()
    x = make_data(graph, seed=3)
    est = PAVI(model=graph, flow="affine", encoding_size=4, max_steps=1200,
               learning_rate=0.02, seed=0, plateau_window=10_000)
    est.fit(x)
    post = gre_exact_posterior(x["x"], GreSpec.from_graph(graph))
    means = est.posterior_mean(n_samples=512)
    assert abs(means["pop_mean"][0, 0] - post.mean[0, 0]) < 0.5 * post.std[0]


def test_accepts_plate_shaped_array():
    graph = small_graph()
    x = make_data(graph)["x"].reshape(4, 6, 1)
    out = check_observed_data(graph, x)
    assert out["x"].shape == (24, 1)


def test_rejects_wrong_shape():
    with pytest.raises(ValueError, match="expected shape"):
        check_observed_data(small_graph(), np.zeros((5, 1)))


def test_rejects_non_finite():
    bad = np.full((24, 1), np.nan)
    with pytest.raises(ValueError, match="non-finite"):
        check_observed_data(small_graph(), bad)


def test_missing_template_key():
    with pytest.raises(ValueError, match="missing observed"):
        check_observed_data(small_graph(), {"y": np.zeros((24, 1))})
