import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import handcalc as hc
from macvae.collab import (MultVAEModel, decode_to_tag_logprobs, encode_ratings, item_loss_fn, item_objective,
                           multinomial_nll, multvae_loss_fn)
from macvae.errors import ConfigError
from macvae.numerics import gradient_check


def model(J=5, K=3, H=4, seed=0, **kw):
    return MultVAEModel.create(J, K, H, np.random.default_rng(seed), **kw)


def test_zero_row_zero_encoder_gives_standard_prior():
    m = MultVAEModel.create(4, 2, 3, rng=None)
    q = encode_ratings(np.zeros((1, 4)), m)
    assert np.all(q.mean == 0) and np.all(q.logvar == 0)


def test_duplicate_rows_identical_posteriors():
    m = model()
    rows = np.array([[1, 0, 1, 0, 1], [1, 0, 1, 0, 1], [0, 1, 0, 0, 0]], dtype=float)
    q = encode_ratings(rows, m)
    assert np.array_equal(q.mean[0], q.mean[1]) and np.array_equal(q.logvar[0], q.logvar[1])


def test_scaled_row_same_posterior(rng):
    m = model()
    row = rng.random((1, 5))
    a, b = encode_ratings(row, m), encode_ratings(5 * row, m)
    np.testing.assert_allclose(a.mean, b.mean, rtol=0, atol=1e-14)
    np.testing.assert_allclose(a.logvar, b.logvar, rtol=0, atol=1e-14)


def test_normalisation_flag_off_changes_posterior(rng):
    m = model(normalize_input=False)
    row = rng.random((1, 5))
    assert not np.allclose(encode_ratings(row, m).mean, encode_ratings(5 * row, m).mean)


def test_zero_decoder_is_uniform(rng):
    m = MultVAEModel.create(6, 3, 4, rng=None)
    out = decode_to_tag_logprobs(rng.standard_normal((3, 3)), m)
    np.testing.assert_allclose(out, math.log(1 / 6), rtol=0, atol=1e-15)


def test_decoder_null_space_direction():
    m = model(K=3)
    m.params.values["collab.dec.l0.W"][2, :] = 0.0
    z = np.array([0.3, -0.2, 0.0])
    assert np.array_equal(decode_to_tag_logprobs(z, m), decode_to_tag_logprobs(z + [0, 0, 7.5], m))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decoder_rows_normalise(seed):
    r = np.random.default_rng(seed)
    m = model(seed=seed)
    out = decode_to_tag_logprobs(3 * r.standard_normal((4, 3)), m)
    assert np.all(np.abs(np.exp(out).sum(axis=1) - 1.0) < 1e-12)


def test_encoder_width_mismatch():
    with pytest.raises(ConfigError):
        encode_ratings(np.zeros((1, 4)), model(J=5))


def test_nll_empty_row_is_zero():
    assert multinomial_nll(np.log(np.full(4, 0.25)), np.zeros(4)) == 0.0


def test_nll_two_tags_uniform():
    assert multinomial_nll(np.log(np.full(4, 0.25)), np.array([1, 0, 1, 0.0])) == pytest.approx(2 * math.log(4),
                                                                                                  abs=1e-15)


def test_nll_minimised_at_normalised_counts():
    r = np.array([3.0, 1.0, 2.0])
    best, arg = math.inf, None
    steps = 120
    for a in range(1, steps):
        for b in range(1, steps - a):
            p = np.array([a, b, steps - a - b]) / steps
            v = multinomial_nll(np.log(p), r)
            if v < best:
                best, arg = v, p
    np.testing.assert_allclose(arg, r / r.sum(), atol=1 / steps)
    assert multinomial_nll(np.log(r / r.sum()), r) <= best


def test_negative_lambda_rejected():
    m = model()
    with pytest.raises(ConfigError):
        item_loss_fn(m, np.ones((1, 5)), None, None, -1.0, 1.0, np.zeros((1, 3)))


def test_no_coupling_reduces_to_plain_reconstruction(rng):
    m = model()
    rows = (rng.random((3, 5)) < 0.5).astype(float)
    noise = rng.standard_normal((3, 3))
    aux = rng.standard_normal((3, 3))
    coupled, _ = item_objective(m, rows, aux, aux, 0.0, 0.0, noise, aux_recon=False)
    plain, _ = item_objective(m, rows, None, None, 0.0, 0.0, noise, aux_recon=False)
    from macvae.numerics import loss_and_grad
    reference, _ = loss_and_grad(multvae_loss_fn(m, rows, noise, kl_weight=0.0), m.params)
    assert coupled == plain == reference


def test_aux_equal_to_sample_zeroes_mse(rng):
    m = model()
    rows = np.array([[1, 1, 0, 0, 1.0]])
    noise = rng.standard_normal((1, 3))
    q = encode_ratings(rows, m)
    v = q.mean + noise * np.exp(0.5 * q.logvar)
    with_mse, _ = item_objective(m, rows, v, v, 4.0, 9.0, noise, aux_recon=False)
    without, _ = item_objective(m, rows, None, None, 0.0, 0.0, noise, aux_recon=False)
    assert with_mse == pytest.approx(without, abs=1e-12)


def test_hand_computed_five_terms():
    r = np.random.default_rng(77)
    m = MultVAEModel.create(3, 2, 2, r)
    row = [1.0, 0.0, 1.0]
    noise = [0.3, -1.1]
    mu_c, mu_s = [0.5, -0.25], [-0.4, 0.8]
    lam_c, lam_s = 2.0, 3.0
    p = m.params.values
    norm = math.sqrt(sum(a * a for a in row))
    x = [a / norm for a in row]
    h = hc.tanh(hc.affine(x, p["collab.enc.l0.W"].tolist(), p["collab.enc.l0.b"].tolist()))
    mu = hc.affine(h, p["collab.enc.mu.W"].tolist(), p["collab.enc.mu.b"].tolist())
    lv = hc.affine(h, p["collab.enc.logvar.W"].tolist(), p["collab.enc.logvar.b"].tolist())
    v = [a + e * math.exp(0.5 * l) for a, e, l in zip(mu, noise, lv)]
    dec = [(p["collab.dec.l0.W"].tolist(), p["collab.dec.l0.b"].tolist()),
           (p["collab.dec.l1.W"].tolist(), p["collab.dec.l1.b"].tolist())]

    def nll(z):
        return -sum(a * b for a, b in zip(row, hc.log_softmax(hc.dense_net(z, dec))))

    expected = (nll(v) + 0.5 * lam_c * hc.sqdist(v, mu_c) + 0.5 * lam_s * hc.sqdist(v, mu_s)
                + nll(mu_c) + nll(mu_s))
    got, _ = item_objective(m, np.array([row]), np.array([mu_c]), np.array([mu_s]), lam_c, lam_s,
                            np.array([noise]))
    assert abs(got - expected) < 1e-10


def test_poe_coupling_variant_uses_fused_mean(rng):
    m = model(K=2, J=3)
    rows = np.array([[1.0, 0, 1]])
    noise = rng.standard_normal((1, 2))
    mu_c, mu_s = rng.standard_normal((1, 2)), rng.standard_normal((1, 2))
    q = encode_ratings(rows, m)
    v = q.mean + noise * np.exp(0.5 * q.logvar)
    fused = (2 * mu_c + 3 * mu_s) / 5
    base, _ = item_objective(m, rows, None, None, 0.0, 0.0, noise, aux_recon=False)
    got, _ = item_objective(m, rows, mu_c, mu_s, 2.0, 3.0, noise, aux_recon=False, couple_via_poe=True)
    assert got - base == pytest.approx(2.5 * np.sum((v - fused) ** 2), rel=1e-12)


def test_mse_on_mean_flag(rng):
    m = model(K=2, J=3)
    rows = np.array([[0, 1.0, 1]])
    noise = rng.standard_normal((1, 2))
    aux = rng.standard_normal((1, 2))
    q = encode_ratings(rows, m)
    base, _ = item_objective(m, rows, None, None, 0.0, 0.0, noise, aux_recon=False)
    got, _ = item_objective(m, rows, aux, None, 4.0, 1.0, noise, aux_recon=False, mse_on_mean=True)
    assert got - base == pytest.approx(2.0 * np.sum((q.mean - aux) ** 2), rel=1e-12)


@pytest.mark.parametrize("flags", [{}, {"mse_on_mean": True}, {"couple_via_poe": True}, {"aux_recon": False}])
def test_item_gradient_matches_finite_differences(flags):
    for seed in range(5):
        r = np.random.default_rng(seed)
        J, K = int(r.integers(2, 7)), int(r.integers(1, 4))
        m = MultVAEModel.create(J, K, 3, r)
        rows = (r.random((2, J)) < 0.6).astype(float)
        rows[:, 0] = 1.0
        fn = item_loss_fn(m, rows, r.standard_normal((2, K)), r.standard_normal((2, K)), 1.5, 0.7,
                          r.standard_normal((2, K)), **flags)
        assert gradient_check(fn, m.params, m.params.names()) < 1e-4


def test_gradients_only_touch_item_parameters(rng):
    m = model()
    rows = np.ones((1, 5))
    _, grads = item_objective(m, rows, rng.standard_normal((1, 3)), None, 1.0, 1.0, rng.standard_normal((1, 3)))
    assert set(grads) == set(m.params.names())
    assert all(n.startswith("collab.") for n in grads)
