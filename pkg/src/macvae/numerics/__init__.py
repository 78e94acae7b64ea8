"""Dense differentiable compute core used by the three auto-encoders."""
from . import autodiff
from .autodiff import LOGVAR_MAX, LOGVAR_MIN, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    GaussianParams,
    MLPSpec,
    ParameterStore,
    gaussian_kl,
    glorot_uniform,
    gradient_check,
    init_mlp,
    loss_and_grad,
    mlp_forward,
    numerical_gradient,
    reparameterize,
    softmax_log,
)

__all__ = [
    "GaussianParams", "LOGVAR_MAX", "LOGVAR_MIN", "MLPSpec", "ParameterStore", "Tensor",
    "autodiff", "gaussian_kl", "glorot_uniform", "gradient_check", "init_mlp", "load_checkpoint",
    "loss_and_grad", "mlp_forward", "numerical_gradient", "reparameterize", "save_checkpoint",
    "softmax_log",
]
