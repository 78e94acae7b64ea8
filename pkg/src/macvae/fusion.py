"""Product-of-experts fusion of the content and social Gaussians."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .numerics import GaussianParams


def poe_mean(mu_c, mu_s, lam_c: float, lam_s: float):
    """Precision-weighted mean; either side may be ``None`` (single expert)."""
    if lam_c < 0 or lam_s < 0:
        raise ConfigError("precisions must be non-negative")
    if mu_s is None:
        return mu_c
    if mu_c is None:
        return mu_s
    if lam_c + lam_s <= 0:
        raise ConfigError("lam_c + lam_s must be positive to fuse")
    return (mu_c * lam_c + mu_s * lam_s) / (lam_c + lam_s)


def poe_fuse(q_c: GaussianParams, q_s: GaussianParams, lam_c: float, lam_s: float) -> GaussianParams:
    """Fuse two experts with fixed scalar precisions.

    The per-item log-variances are ignored; the fused variance is the
    inverse of the summed precisions, broadcast over the latent width.
    """
    if q_c.mean.shape != q_s.mean.shape:
        raise ConfigError(f"expert shapes differ: {q_c.mean.shape} vs {q_s.mean.shape}")
    if lam_c + lam_s <= 0:
        raise ConfigError("lam_c + lam_s must be positive to fuse")
    mean = poe_mean(q_c.mean, q_s.mean, lam_c, lam_s)
    logvar = np.full_like(mean, -np.log(lam_c + lam_s))
    return GaussianParams(mean, logvar)
