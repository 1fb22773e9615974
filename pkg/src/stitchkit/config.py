"""Hyperparameter records and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


VARIANTS = ("dfdt", "no_filter", "target_only", "mmd_only", "ot_only")


@dataclass(frozen=True)
class FusionConfig:
    # two-level filter
    xi_percent: float = 25.0
    eta_w: float = 1.0
    beta: float = 1.0 / 3.0
    fragment_length: int = 0          # 0 -> context
    fragment_stride: int = 0          # 0 -> fragment_length
    mmd_samples: int = 32
    bandwidth: str = "median"         # "median" or a positive float
    encoder_kind: str = "random_projection"
    latent_dim: int = 0               # 0 -> min(state_dim, 8)
    norm_bound: float = 1.0
    ot_cost: str = "cosine"
    ot_method: str = "auto"           # auto | exact | sinkhorn
    sinkhorn_eps: float = 0.01
    ot_exact_max_entries: int = 4096
    ot_chunk_size: int = 512
    ot_standardize: bool = False
    # relabeling value pair and command network
    zeta: float = 0.7
    zeta_cmd: float = 0.8
    gamma: float = 0.99
    hidden: int = 64
    lr: float = 3e-4
    value_steps: int = 2000
    command_steps: int = 2000
    standardize_adv: bool = True
    adv_eps: float = 1e-6
    weight_mode: str = "weight"       # weight | resample | both
    # sequence policy and critics
    context: int = 5
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    dropout: float = 0.1
    policy_std: float = math.sqrt(0.1)
    alpha: float = 0.05
    eta_reg: float = 0.05
    eta_exp: float = 5e-3
    train_steps: int = 1000
    bc_steps: int = 1000
    batch_size: int = 192             # source share is beta * batch_size
    critic_weight_inside: bool = True
    checkpoint_every: int = 1000
    # run control
    variant: str = "dfdt"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        need(0 < self.xi_percent <= 100, f"xi_percent must lie in (0, 100], got {self.xi_percent}")
        need(self.eta_w > 0, "eta_w must be positive")
        need(0 <= self.beta <= 1, "beta must lie in [0, 1]")
        need(0 < self.zeta < 1, "zeta must lie in (0, 1)")
        need(0 < self.zeta_cmd < 1, "zeta_cmd must lie in (0, 1)")
        need(0 <= self.gamma < 1, "gamma must lie in [0, 1)")
        need(0 <= self.eta_exp <= 1, "eta_exp must lie in [0, 1]")
        need(self.alpha >= 0 and self.eta_reg >= 0, "alpha and eta_reg must be nonnegative")
        need(self.context >= 1, "context must be >= 1")
        need(self.fragment_length >= 0 and self.fragment_stride >= 0, "fragment sizes must be >= 0")
        need(self.mmd_samples >= 1, "mmd_samples must be >= 1")
        need(self.norm_bound > 0, "norm_bound must be positive")
        need(self.encoder_kind in ("identity", "random_projection", "learned"), f"unknown encoder_kind {self.encoder_kind!r}")
        need(self.ot_cost in ("cosine", "euclidean"), f"unknown ot_cost {self.ot_cost!r}")
        need(self.ot_method in ("auto", "exact", "sinkhorn"), f"unknown ot_method {self.ot_method!r}")
        need(self.weight_mode in ("weight", "resample", "both"), f"unknown weight_mode {self.weight_mode!r}")
        need(self.variant in VARIANTS, f"unknown variant {self.variant!r}")
        need(self.embed_dim % self.n_heads == 0, "embed_dim must be divisible by n_heads")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        if self.bandwidth != "median":
            try:
                need(float(self.bandwidth) > 0, "bandwidth must be positive")
            except ValueError:
                raise ConfigError(f"bandwidth must be 'median' or a positive number, got {self.bandwidth!r}")

    @property
    def frag_length(self) -> int:
        return self.fragment_length or self.context

    @property
    def frag_stride(self) -> int:
        return self.fragment_stride or self.frag_length

    @property
    def batch_target(self) -> int:
        return math.floor((1.0 - self.beta) * self.batch_size + 1e-9)

    @property
    def batch_source(self) -> int:
        return self.batch_size - self.batch_target

    def replace(self, **changes) -> "FusionConfig":
        return dataclasses.replace(self, **changes)

    def for_variant(self) -> "FusionConfig":
        """Resolve the ablation variant into concrete filter settings."""
        if self.variant == "no_filter":
            return self.replace(xi_percent=100.0)
        if self.variant == "target_only":
            return self.replace(beta=0.0, alpha=0.0, eta_reg=0.0)
        if self.variant == "ot_only":
            return self.replace(xi_percent=100.0)
        return self

    @property
    def use_ot_weights(self) -> bool:
        return self.variant in ("dfdt", "ot_only")


def _coerce(value: str, default: Any, name: str):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {type(default).__name__}")
    return value


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def build(cls, values: dict[str, str], strict: bool = True):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[key] = _coerce(value, known[key].default, key)
    return cls(**kwargs)


def to_flat(*records) -> str:
    lines = []
    for rec in records:
        for f in fields(rec):
            lines.append(f"{f.name} = {getattr(rec, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"


def config_hash(*records) -> str:
    """Content hash of the resolved config (defaults expanded, keys in declaration order)."""
    return hashlib.sha256(to_flat(*records).encode()).hexdigest()[:16]


def load_fusion_config(path: str | Path) -> FusionConfig:
    values = parse_flat(Path(path).read_text(), str(path))
    return build(FusionConfig, values, strict=False)
