"""Gaussian VAE over TF-IDF rows and the coupled content objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numerics import GaussianParams, MLPSpec, ParameterStore, autodiff as ad, init_mlp, loss_and_grad, mlp_forward

ENC = "content.enc"
DEC = "content.dec"


@dataclass
class ContentVAEModel:
    vocab_size: int
    latent_dim: int = 64
    hidden: tuple[int, ...] = (64, 64)
    params: ParameterStore = field(default_factory=ParameterStore)

    @property
    def encoder(self) -> MLPSpec:
        return MLPSpec((self.vocab_size, *self.hidden, self.latent_dim), "tanh", "mean_and_logvar")

    @property
    def decoder(self) -> MLPSpec:
        return MLPSpec((self.latent_dim, *self.hidden[::-1], self.vocab_size), "tanh", "single")

    @classmethod
    def create(cls, vocab_size, latent_dim=64, hidden=(64, 64), rng=None) -> "ContentVAEModel":
        model = cls(vocab_size, latent_dim, tuple(hidden))
        init_mlp(model.params, model.encoder, ENC, rng)
        init_mlp(model.params, model.decoder, DEC, rng)
        return model


def _rows(x, model):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.vocab_size:
        raise ConfigError(f"content rows have width {x.shape[1]}, model expects {model.vocab_size}")
    return x


def encode_content(x, model: ContentVAEModel) -> GaussianParams:
    mu, lv = mlp_forward(_rows(x, model), model.encoder, model.params.values, ENC)[-1]
    return GaussianParams(mu.value, lv.value)


def decode_content(z, model: ContentVAEModel) -> np.ndarray:
    """Linear reconstruction of TF-IDF rows (no link function)."""
    return mlp_forward(np.atleast_2d(z), model.decoder, model.params.values, DEC)[-1].value


def content_loss_fn(model: ContentVAEModel, x, v_hat, lam_c: float, noise):
    """0.5 ||x - dec(c)||^2 + KL(q_c || N(0, I)) + (lam_c / 2) ||v_hat - c||^2, summed over the batch."""
    if lam_c < 0:
        raise ConfigError(f"lam_c must be non-negative, got {lam_c}")
    x = _rows(x, model)
    noise = np.asarray(noise, dtype=np.float64).reshape(len(x), model.latent_dim)

    def loss(p):
        mu, lv = mlp_forward(x, model.encoder, p, ENC)[-1]
        c = ad.reparameterize(mu, lv, noise)
        recon = mlp_forward(c, model.decoder, p, DEC)[-1]
        total = ad.scale(ad.total(ad.square(ad.sub(x, recon))), 0.5) + ad.gaussian_kl(mu, lv)
        if lam_c > 0 and v_hat is not None:
            total = total + ad.scale(ad.total(ad.square(ad.sub(v_hat, c))), 0.5 * lam_c)
        return total

    return loss


def content_objective(model: ContentVAEModel, x, v_hat, lam_c: float, noise):
    return loss_and_grad(content_loss_fn(model, x, v_hat, lam_c, noise), model.params)
