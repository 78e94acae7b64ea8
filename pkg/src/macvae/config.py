"""Flat ``key=value`` configuration for training runs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("full", "content", "social", "collab")


@dataclass
class CouplingConfig:
    # coupling precisions and latent size
    lam_c: float = 10.0
    lam_s: float = 10.0
    latent_dim: int = 64
    variant: str = "full"
    # architecture
    collab_hidden: int = 600
    content_hidden: str = "64,64"
    social_hidden: int = 64
    fanouts: str = "20,20"
    # optimisation
    lr_item: float = 1e-5
    lr_content: float = 1e-4
    lr_social: float = 5e-4
    lr_pretrain: float = 1e-3
    batch_size: int = 64
    social_batch_size: int = 64
    pretrain_epochs: int = 50
    pretrain_kl_weight: float = 1.0
    epochs: int = 100
    patience: int = 10
    val_at: int = 20
    seed: int = 0
    # graph sampling
    walk_length: int = 3
    walks_per_node: int = 5
    # flags
    mse_on_mean: bool = False
    couple_via_poe: bool = False
    concat_self: bool = False
    aux_recon_enabled: bool = True
    normalize_input: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _coerce(f, getattr(self, f.name)))
        if self.lam_c <= 0 or self.lam_s <= 0:
            raise ConfigError(f"lam_c and lam_s must be positive (got {self.lam_c}, {self.lam_s})")
        if self.latent_dim <= 0:
            raise ConfigError("latent_dim must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.fanout_list) != 2:
            raise ConfigError("fanouts must list two layers, e.g. 20,20")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        for name in ("batch_size", "social_batch_size", "val_at", "walk_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "pretrain_epochs", "patience", "walks_per_node"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def fanout_list(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.fanouts.split(",") if x.strip())

    @property
    def content_hidden_list(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.content_hidden.split(",") if x.strip())

    @property
    def use_content(self) -> bool:
        return self.variant in ("full", "content")

    @property
    def use_social(self) -> bool:
        return self.variant in ("full", "social")

    def replace(self, **changes) -> "CouplingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Settings sized for the bundled synthetic corpus on one CPU core. The
# defaults above keep the published learning rates, which need far more
# epochs than a desk-scale run can afford.
DESK = {"latent_dim": 32, "collab_hidden": 128, "content_hidden": "64", "social_hidden": 64, "fanouts": "5,5",
        "lr_item": 1e-3, "lr_content": 1e-3, "lr_social": 1e-3, "lr_pretrain": 1e-3, "pretrain_epochs": 30,
        "epochs": 100, "patience": 0, "val_at": 10, "walks_per_node": 2}


def desk_config(**changes) -> CouplingConfig:
    return CouplingConfig(**{**DESK, **changes})


def _coerce(f, value):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot read {value!r} as {kind}") from None


def parse_pairs(lines, source="<config>") -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def format_pairs(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def coupling_from_pairs(pairs: dict, strict: bool = True) -> CouplingConfig:
    known = {f.name for f in fields(CouplingConfig)}
    unknown = set(pairs) - known
    if strict and unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return CouplingConfig(**{k: v for k, v in pairs.items() if k in known})


def load_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path))
