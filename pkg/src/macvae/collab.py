"""Multinomial VAE over item-tag rows and the coupled item objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fusion import poe_mean
from .numerics import GaussianParams, MLPSpec, ParameterStore, autodiff as ad, init_mlp, loss_and_grad, mlp_forward

ENC = "collab.enc"
DEC = "collab.dec"


@dataclass
class MultVAEModel:
    n_tags: int
    latent_dim: int = 64
    hidden: int = 600
    normalize_input: bool = True
    params: ParameterStore = field(default_factory=ParameterStore)

    @property
    def encoder(self) -> MLPSpec:
        return MLPSpec((self.n_tags, self.hidden, self.latent_dim), "tanh", "mean_and_logvar")

    @property
    def decoder(self) -> MLPSpec:
        return MLPSpec((self.latent_dim, self.hidden, self.n_tags), "tanh", "single")

    @classmethod
    def create(cls, n_tags, latent_dim=64, hidden=600, rng=None, normalize_input=True) -> "MultVAEModel":
        model = cls(n_tags, latent_dim, hidden, normalize_input)
        init_mlp(model.params, model.encoder, ENC, rng)
        init_mlp(model.params, model.decoder, DEC, rng)
        return model


def _prepare_rows(rows, model: MultVAEModel, dropout_mask=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if x.shape[1] != model.n_tags:
        raise ConfigError(f"rating rows have width {x.shape[1]}, model expects {model.n_tags}")
    if dropout_mask is not None:
        x = x * dropout_mask
    if model.normalize_input:
        norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return x


def _encode(params, model, x):
    return mlp_forward(x, model.encoder, params, ENC)[-1]


def _decode(params, model, z):
    return ad.log_softmax(mlp_forward(z, model.decoder, params, DEC)[-1])


def encode_ratings(rows, model: MultVAEModel) -> GaussianParams:
    """Posterior q(v | r) for a batch of binary tag rows (L2-normalised first)."""
    mu, lv = _encode(model.params.values, model, _prepare_rows(rows, model))
    return GaussianParams(mu.value, lv.value)


def decode_to_tag_logprobs(z, model: MultVAEModel) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    out = _decode(model.params.values, model, np.atleast_2d(z)).value
    return out[0] if single else out


def multinomial_nll(log_probs, row):
    """-sum_j r_j log pi_j (multinomial coefficient dropped); batches are summed."""
    if isinstance(log_probs, ad.Tensor):
        return ad.scale(ad.total(ad.mul(log_probs, row)), -1.0)
    log_probs, row = np.asarray(log_probs, dtype=np.float64), np.asarray(row, dtype=np.float64)
    if log_probs.shape != row.shape:
        raise ConfigError(f"log-prob shape {log_probs.shape} != row shape {row.shape}")
    return float(-np.sum(row * log_probs))


def _check_lambdas(**lams):
    for name, value in lams.items():
        if value < 0:
            raise ConfigError(f"{name} must be non-negative, got {value}")


def item_loss_fn(model: MultVAEModel, rows, content_mu, social_mu, lam_c: float, lam_s: float, noise,
                 *, aux_recon=True, mse_on_mean=False, couple_via_poe=False, dropout_mask=None):
    """Closure over the item-block loss, for :func:`loss_and_grad`.

    ``content_mu`` / ``social_mu`` are constants (``None`` disables that
    expert). The MSE terms read the sampled latent unless ``mse_on_mean``.
    """
    _check_lambdas(lam_c=lam_c, lam_s=lam_s)
    target = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    x = _prepare_rows(rows, model, dropout_mask)
    noise = np.asarray(noise, dtype=np.float64).reshape(len(x), model.latent_dim)

    def loss(p):
        mu, lv = _encode(p, model, x)
        v = ad.reparameterize(mu, lv, noise)
        total = multinomial_nll(_decode(p, model, v), target)
        anchor = mu if mse_on_mean else v
        if couple_via_poe and content_mu is not None and social_mu is not None:
            fused = poe_mean(content_mu, social_mu, lam_c, lam_s)
            total = total + ad.scale(ad.total(ad.square(ad.sub(anchor, fused))), 0.5 * (lam_c + lam_s))
        else:
            for lam, aux in ((lam_c, content_mu), (lam_s, social_mu)):
                if aux is not None and lam > 0:
                    total = total + ad.scale(ad.total(ad.square(ad.sub(anchor, aux))), 0.5 * lam)
        if aux_recon:
            for aux in (content_mu, social_mu):
                if aux is not None:
                    total = total + multinomial_nll(_decode(p, model, np.atleast_2d(aux)), target)
        return total

    return loss


def item_objective(model: MultVAEModel, rows, content_mu, social_mu, lam_c: float, lam_s: float, noise, **flags):
    """Loss of the item block and gradients for the collaborative encoder/decoder."""
    fn = item_loss_fn(model, rows, content_mu, social_mu, lam_c, lam_s, noise, **flags)
    return loss_and_grad(fn, model.params)


def multvae_loss_fn(model: MultVAEModel, rows, noise, kl_weight: float = 1.0, dropout_mask=None):
    """Plain Mult-VAE objective: reconstruction plus ``kl_weight`` times KL."""
    target = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    x = _prepare_rows(rows, model, dropout_mask)
    noise = np.asarray(noise, dtype=np.float64).reshape(len(x), model.latent_dim)

    def loss(p):
        mu, lv = _encode(p, model, x)
        total = multinomial_nll(_decode(p, model, ad.reparameterize(mu, lv, noise)), target)
        if kl_weight:
            total = total + ad.scale(ad.gaussian_kl(mu, lv), kl_weight)
        return total

    return loss
