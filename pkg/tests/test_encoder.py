import math

import numpy as np
import pytest

from platevi import diffcore as dc
from platevi.encoder import EncoderStack, SetPoolEncoder, set_size_generalization_check
from platevi.model import gre_model, hv_model


def harness_stack(n_groups=4, n_obs=5):
    g = gre_model(n_groups=n_groups, n_per_group=n_obs, dim=2)
    return EncoderStack(g, enc_dim=2, identity=True)


def test_permutation_invariance_within_group():
    rng = np.random.default_rng(0)
    g = gre_model(n_groups=3, n_per_group=6, dim=2)
    stack = EncoderStack(g, enc_dim=4, rng=rng)
    x = rng.normal(size=(18, 2))
    cards = {"group": 3, "obs": 6}
    enc = stack.encode(x, cards)[("group",)].data

    # permute subjects inside group 1 only
    xp = x.reshape(3, 6, 2).copy()
    xp[1] = xp[1][rng.permutation(6)]
    encp = stack.encode(xp.reshape(18, 2), cards)[("group",)].data
    np.testing.assert_allclose(enc, encp, atol=1e-12)


def test_permutation_of_groups_permutes_group_encodings():
    rng = np.random.default_rng(1)
    g = gre_model(n_groups=4, n_per_group=3, dim=1)
    stack = EncoderStack(g, enc_dim=3, rng=rng)
    x = rng.normal(size=(12, 1))
    cards = {"group": 4, "obs": 3}
    enc = stack.encode(x, cards)
    perm = np.array([2, 0, 3, 1])
    xp = x.reshape(4, 3, 1)[perm].reshape(12, 1)
    encp = stack.encode(xp, cards)
    np.testing.assert_allclose(encp[("group",)].data, enc[("group",)].data[perm], atol=1e-12)
    # the root-level encoding pools over groups, so it is unchanged
    np.testing.assert_allclose(encp[()].data, enc[()].data, atol=1e-12)


def test_singleton_pooled_set():
    rng = np.random.default_rng(2)
    g = gre_model(n_groups=2, n_per_group=1, dim=2)
    stack = EncoderStack(g, enc_dim=4, rng=rng)
    x = rng.normal(size=(2, 2))
    enc = stack.encode(x, {"group": 2, "obs": 1})
    assert enc[("group",)].data.shape == (2, 4)


def test_harness_mode_group_encoding_is_empirical_mean():
    rng = np.random.default_rng(3)
    stack = harness_stack(n_groups=4, n_obs=5)
    x = rng.normal(size=(20, 2))
    enc = stack.encode(x, {"group": 4, "obs": 5})
    direct = x.reshape(4, 5, 2).mean(axis=1)
    np.testing.assert_allclose(enc[("group",)].data, direct, atol=1e-14)
    np.testing.assert_allclose(enc[()].data, direct.mean(axis=0, keepdims=True), atol=1e-14)


def test_output_cardinality_contract():
    rng = np.random.default_rng(4)
    g = gre_model(n_groups=7, n_per_group=5, dim=3)
    stack = EncoderStack(g, enc_dim=6, rng=rng)
    x = rng.normal(size=(2 * 3, 3))
    enc = stack.encode(x, {"group": 2, "obs": 3})
    assert enc[("group",)].data.shape == (2, 6)
    assert enc[()].data.shape == (1, 6)


def test_lognormal_observations_encoded_in_log_space():
    stack = EncoderStack(hv_model(n_groups=2, n_per_group=3, dim=1), enc_dim=1, identity=True)
    x = np.exp(np.arange(6.0)).reshape(6, 1)
    enc = stack.encode(x, {"group": 2, "obs": 3})
    np.testing.assert_allclose(
        enc[("group",)].data, np.log(x).reshape(2, 3, 1).mean(axis=1), atol=1e-14
    )


def test_missing_axis_label_rejected():
    stack = harness_stack()
    with pytest.raises(dc.ContractError, match="plate axis"):
        stack.encode(np.zeros((4, 2)), {"group": 4})


def test_identical_sets_zero_distance():
    rng = np.random.default_rng(5)
    stack = harness_stack(n_groups=1, n_obs=8)
    x = rng.normal(size=(8, 2))
    report = set_size_generalization_check(
        stack, x, {"group": 1, "obs": 8}, x, {"group": 1, "obs": 8}
    )
    assert all(d == 0.0 for d in report.distances.values())


def test_set_size_generalization_clt():
    # harness mode: encodings are means, so both concentrate around mu
    mu = np.array([1.3, -0.6])
    rng = np.random.default_rng(6)
    stack = harness_stack(n_groups=1, n_obs=3)
    small = rng.normal(loc=mu, size=(3, 2))
    big = rng.normal(loc=mu, size=(20, 2))
    enc_small = stack.encode(small, {"group": 1, "obs": 3})[("group",)].data[0]
    enc_big = stack.encode(big, {"group": 1, "obs": 20})[("group",)].data[0]
    assert np.all(np.abs(enc_small - mu) < 3.0 / math.sqrt(3))
    assert np.all(np.abs(enc_big - mu) < 3.0 / math.sqrt(20))


def test_doubling_set_size_halves_encoding_variance():
    rng = np.random.default_rng(7)
    stack = harness_stack(n_groups=1, n_obs=4)
    n_resample = 1000
    enc_n, enc_2n = [], []
    for _ in range(n_resample):
        enc_n.append(stack.encode(rng.normal(size=(8, 2)), {"group": 1, "obs": 8})[("group",)].data[0, 0])
        enc_2n.append(stack.encode(rng.normal(size=(16, 2)), {"group": 1, "obs": 16})[("group",)].data[0, 0])
    ratio = np.var(enc_2n) / np.var(enc_n)
    assert 0.4 <= ratio <= 0.6


def test_encoding_depends_only_on_its_slice():
    # feeding a different second group leaves the first group's encoding unchanged
    rng = np.random.default_rng(8)
    g = gre_model(n_groups=2, n_per_group=4, dim=2)
    stack = EncoderStack(g, enc_dim=4, rng=rng)
    x = rng.normal(size=(8, 2))
    x2 = x.copy()
    x2[4:] = rng.normal(size=(4, 2))
    e1 = stack.encode(x, {"group": 2, "obs": 4})[("group",)].data
    e2 = stack.encode(x2, {"group": 2, "obs": 4})[("group",)].data
    np.testing.assert_array_equal(e1[0], e2[0])
    assert not np.allclose(e1[1], e2[1])


def test_gradients_flow_to_encoder_weights():
    rng = np.random.default_rng(9)
    g = gre_model(n_groups=2, n_per_group=3, dim=1)
    stack = EncoderStack(g, enc_dim=2, rng=rng)
    tape = dc.Tape()
    enc = stack.encode(rng.normal(size=(6, 1)), {"group": 2, "obs": 3}, tape)
    loss = dc.array_sum(dc.square(enc[("group",)]))
    grads = tape.backward(loss)
    total = sum(np.abs(grads[p.id]).sum() for p in stack.parameters())
    assert total > 0


def test_set_pool_encoder_row_count_contract():
    enc = SetPoolEncoder("s", 2, 3, identity=True)
    with pytest.raises(dc.ContractError, match="rows"):
        enc.forward(dc.constant(np.zeros((5, 2))), n_sets=2, set_size=3)
