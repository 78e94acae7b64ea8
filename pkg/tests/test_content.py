import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import handcalc as hc
from macvae.content import ContentVAEModel, content_loss_fn, content_objective, decode_content, encode_content
from macvae.errors import ConfigError
from macvae.numerics import gradient_check


def model(V=6, K=3, hidden=(4,), seed=0):
    return ContentVAEModel.create(V, K, hidden, np.random.default_rng(seed))


def test_zero_row_zero_encoder():
    m = ContentVAEModel.create(5, 2, (3,), rng=None)
    q = encode_content(np.zeros((1, 5)), m)
    assert np.all(q.mean == 0) and np.all(q.logvar == 0)


def test_identical_rows_identical_posteriors(rng):
    x = np.repeat(rng.random((1, 6)), 3, axis=0)
    q = encode_content(x, model())
    assert np.all(q.mean == q.mean[0]) and np.all(q.logvar == q.logvar[0])


def test_posterior_is_continuous(rng):
    m = model()
    x = rng.random((1, 6))
    y = x.copy()
    y[0, 2] += 1e-6
    delta = np.abs(encode_content(y, m).mean - encode_content(x, m).mean).max()
    assert 0 < delta < 1e-5


def test_perfect_autoencoder_and_standard_posterior_give_zero_loss():
    # width-1 vocabulary, x = 0: zero weights reconstruct it and encode N(0, 1)
    m = ContentVAEModel.create(3, 2, (2,), rng=None)
    x = np.zeros((2, 3))
    loss, _ = content_objective(m, x, None, 0.0, np.zeros((2, 2)))
    assert loss == 0.0


def test_v_hat_equal_to_sample_zeroes_mse(rng):
    m = model()
    x = rng.random((2, 6))
    noise = rng.standard_normal((2, 3))
    q = encode_content(x, m)
    c = q.mean + noise * np.exp(0.5 * q.logvar)
    a, _ = content_objective(m, x, c, 5.0, noise)
    b, _ = content_objective(m, x, None, 0.0, noise)
    assert a == pytest.approx(b, abs=1e-12)


def test_hand_computed_three_terms():
    m = ContentVAEModel.create(4, 2, (3,), np.random.default_rng(5))
    p = m.params.values
    x = [0.1, 0.0, 0.7, 0.2]
    noise = [-0.6, 0.9]
    v_hat = [0.25, -0.5]
    lam = 3.0
    enc_h = hc.tanh(hc.affine(x, p["content.enc.l0.W"].tolist(), p["content.enc.l0.b"].tolist()))
    mu = hc.affine(enc_h, p["content.enc.mu.W"].tolist(), p["content.enc.mu.b"].tolist())
    lv = hc.affine(enc_h, p["content.enc.logvar.W"].tolist(), p["content.enc.logvar.b"].tolist())
    c = [a + e * math.exp(0.5 * l) for a, e, l in zip(mu, noise, lv)]
    recon = hc.dense_net(c, [(p["content.dec.l0.W"].tolist(), p["content.dec.l0.b"].tolist()),
                             (p["content.dec.l1.W"].tolist(), p["content.dec.l1.b"].tolist())])
    expected = 0.5 * hc.sqdist(x, recon) + hc.kl(mu, lv) + 0.5 * lam * hc.sqdist(v_hat, c)
    got, _ = content_objective(m, np.array([x]), np.array([v_hat]), lam, np.array([noise]))
    assert abs(got - expected) < 1e-10


def test_decoder_output_has_no_link_function(rng):
    m = model()
    p = m.params.values
    z = 4 * rng.standard_normal(3)
    layers = [(p["content.dec.l0.W"].tolist(), p["content.dec.l0.b"].tolist()),
              (p["content.dec.l1.W"].tolist(), p["content.dec.l1.b"].tolist())]
    np.testing.assert_allclose(decode_content(z[None, :], m)[0], hc.dense_net(z.tolist(), layers),
                               rtol=0, atol=1e-12)


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        content_loss_fn(model(), np.zeros((1, 6)), None, -0.1, np.zeros((1, 3)))


def test_width_mismatch_rejected():
    with pytest.raises(ConfigError):
        encode_content(np.zeros((1, 5)), model(V=6))


def test_gradient_matches_finite_differences():
    for seed in range(8):
        r = np.random.default_rng(seed)
        V, K = int(r.integers(2, 9)), int(r.integers(1, 4))
        m = ContentVAEModel.create(V, K, (3, 2), r)
        x = r.random((2, V))
        fn = content_loss_fn(m, x, r.standard_normal((2, K)), 1.3, r.standard_normal((2, K)))
        assert gradient_check(fn, m.params, m.params.names()) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_terms_nonnegative(seed):
    r = np.random.default_rng(seed)
    m = model(seed=seed)
    x = r.random((3, 6))
    q = encode_content(x, m)
    assert hc.kl(q.mean[0].tolist(), q.logvar[0].tolist()) >= 0
    loss, _ = content_objective(m, x, r.standard_normal((3, 3)), 2.0, r.standard_normal((3, 3)))
    assert loss >= 0
