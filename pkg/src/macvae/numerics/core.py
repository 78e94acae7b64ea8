"""Parameters, MLPs, Gaussian utilities and gradient plumbing."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from ..errors import ConfigError, NumericalError
from . import autodiff as ad
from .autodiff import LOGVAR_MAX, LOGVAR_MIN, Tensor

HIDDEN_ACTIVATIONS = ("tanh", "relu", "sigmoid")
OUTPUT_HEADS = ("single", "mean_and_logvar")


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_heads: str = "single"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ConfigError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigError(f"layer widths must be positive: {self.layer_widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.hidden_activation!r}")
        if self.output_heads not in OUTPUT_HEADS:
            raise ConfigError(f"unknown output heads {self.output_heads!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def slot_shapes(self, prefix: str) -> dict[str, tuple[int, ...]]:
        """Parameter slot names and shapes; the last layer is duplicated for dual heads."""
        shapes = {}
        widths = self.layer_widths
        for i in range(self.n_layers - 1):
            shapes[f"{prefix}.l{i}.W"] = (widths[i], widths[i + 1])
            shapes[f"{prefix}.l{i}.b"] = (widths[i + 1],)
        fan_in, fan_out = widths[-2], widths[-1]
        heads = ("mu", "logvar") if self.output_heads == "mean_and_logvar" else (f"l{self.n_layers - 1}",)
        for head in heads:
            shapes[f"{prefix}.{head}.W"] = (fan_in, fan_out)
            shapes[f"{prefix}.{head}.b"] = (fan_out,)
        return shapes

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "hidden_activation": self.hidden_activation,
                "output_heads": self.output_heads}


@dataclass
class GaussianParams:
    """Diagonal Gaussian posterior; works for a single vector or a batch of rows."""

    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.logvar = np.clip(np.asarray(self.logvar, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
        if self.mean.shape != self.logvar.shape:
            raise ConfigError(f"mean {self.mean.shape} and logvar {self.logvar.shape} differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.logvar))):
            raise NumericalError("non-finite Gaussian parameters", where="GaussianParams")

    def __getitem__(self, index):
        return GaussianParams(self.mean[index], self.logvar[index])

    def __len__(self):
        return len(self.mean)


@dataclass
class ParameterStore:
    """Named parameter arrays with matching gradient slots and Adam moments."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray):
        if name in self.values:
            raise ConfigError(f"duplicate parameter slot {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.first_moment[name] = np.zeros_like(value)
        self.second_moment[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterStore":
        return copy.deepcopy(self)

    def adam_step(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        """One Adam update from the accumulated gradients, then zero them."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for name, value in self.values.items():
            g = self.grads[name]
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.zero_grad()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(store: ParameterStore, spec: MLPSpec, prefix: str, rng: np.random.Generator | None):
    """Glorot-uniform weights and zero biases; ``rng=None`` gives an all-zero net."""
    for name, shape in spec.slot_shapes(prefix).items():
        if len(shape) == 2 and rng is not None:
            store.add(name, glorot_uniform(rng, *shape))
        else:
            store.add(name, np.zeros(shape))


def mlp_forward(x, spec: MLPSpec, params: Mapping, prefix: str) -> list:
    """Run an MLP and keep every layer's activation.

    ``params`` maps slot names to arrays or tensors. The last entry of the
    returned list is the linear output, or a ``(mean, logvar)`` pair of
    tensors for dual-head specs (logvar clamped).
    """
    x = ad.as_tensor(x)
    if x.value.shape[-1] != spec.layer_widths[0]:
        raise ConfigError(f"{prefix}: input width {x.value.shape[-1]} != {spec.layer_widths[0]}")
    squeeze = x.value.ndim == 1
    if squeeze and x.requires_grad:
        raise ConfigError("pass a 2-D batch when differentiating through an MLP input")
    h = Tensor(x.value[None, :]) if squeeze else x
    act = ad.ACTIVATIONS[spec.hidden_activation]
    activations = [h]
    for i in range(spec.n_layers - 1):
        h = act(ad.affine(h, params[f"{prefix}.l{i}.W"], params[f"{prefix}.l{i}.b"]))
        activations.append(h)
    if spec.output_heads == "mean_and_logvar":
        mu = ad.affine(h, params[f"{prefix}.mu.W"], params[f"{prefix}.mu.b"])
        lv = ad.clamp(ad.affine(h, params[f"{prefix}.logvar.W"], params[f"{prefix}.logvar.b"]),
                      LOGVAR_MIN, LOGVAR_MAX)
        out = (mu, lv)
    else:
        last = spec.n_layers - 1
        out = ad.affine(h, params[f"{prefix}.l{last}.W"], params[f"{prefix}.l{last}.b"])
    if squeeze:
        out = tuple(Tensor(t.value[0]) for t in out) if isinstance(out, tuple) else Tensor(out.value[0])
        activations = [Tensor(a.value[0]) for a in activations]
    activations.append(out)
    return activations


def loss_and_grad(loss_fn: Callable[[dict], Tensor], params: ParameterStore,
                  names: Iterable[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on leaf tensors of ``params`` and back-propagate.

    Gradients for the selected slots are added to ``params.grads`` and also
    returned. Slots outside ``names`` are passed as constants.
    """
    selected = set(params.values) if names is None else set(names)
    leaves = {n: (ad.leaf(v, n) if n in selected else Tensor(v)) for n, v in params.values.items()}
    loss = ad.as_tensor(loss_fn(leaves))
    if loss.value.size != 1:
        raise ConfigError(f"loss must be a scalar, got shape {loss.value.shape}")
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss from op '{loss.op}'", where=loss.op)
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for n in selected:
        g = leaves[n].grad
        g = np.zeros_like(params.values[n]) if g is None else np.asarray(g, dtype=np.float64)
        params.grads[n] += g
        grads[n] = g
    return value, grads


def numerical_gradient(loss_fn: Callable[[dict], Tensor], params: ParameterStore, name: str,
                       eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn`` for one slot."""
    base = params.values[name]
    out = np.zeros_like(base)

    def value():
        return float(ad.as_tensor(loss_fn(dict(params.values))).value)

    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + eps
        plus = value()
        base[idx] = orig - eps
        minus = value()
        base[idx] = orig
        out[idx] = (plus - minus) / (2.0 * eps)
    return out


def gradient_check(loss_fn, params: ParameterStore, names=None, eps: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor); ``floor`` only guards
    entries where both gradients vanish.
    """
    names = list(params.values) if names is None else list(names)
    scratch = ParameterStore()
    for n, v in params.values.items():
        scratch.add(n, v)
    _, analytic = loss_and_grad(loss_fn, scratch, names)
    worst = 0.0
    for n in names:
        numeric = numerical_gradient(loss_fn, scratch, n, eps)
        denom = np.maximum(np.maximum(np.abs(analytic[n]), np.abs(numeric)), floor)
        err = np.abs(analytic[n] - numeric) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# -- plain-array helpers ---------------------------------------------------------

def softmax_log(logits) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ConfigError("softmax over an empty vector")
    return ad.log_softmax(logits).value


def gaussian_kl(q: GaussianParams) -> float:
    return float(ad.gaussian_kl(q.mean, q.logvar).value)


def reparameterize(q: GaussianParams, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mean.shape:
        raise ConfigError(f"noise shape {noise.shape} != latent shape {q.mean.shape}")
    return ad.reparameterize(q.mean, q.logvar, noise).value
