"""State encoders mapping raw states into a norm-bounded latent space."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, FusionConfig
from .datamodel import Dataset
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

KINDS = ("identity", "random_projection", "learned")


@dataclass(frozen=True, eq=False)
class Encoder:
    """Affine map ``z = W s + b`` followed by L2 clipping to ``norm_bound``.

    For ``kind="identity"`` the affine part is skipped.
    """

    kind: str
    state_dim: int
    latent_dim: int
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    norm_bound: float = 1.0
    history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.norm_bound <= 0:
            raise ConfigError("norm_bound must be positive")
        if self.kind == "identity":
            if self.latent_dim != self.state_dim:
                raise ConfigError("identity encoder needs latent_dim == state_dim")
            return
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.latent_dim, self.state_dim):
            raise ConfigError(f"weights must be {(self.latent_dim, self.state_dim)}, got {w.shape}")
        b = np.zeros(self.latent_dim) if self.bias is None else np.asarray(self.bias, dtype=float)
        if b.shape != (self.latent_dim,):
            raise ConfigError("bias must have latent_dim entries")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def save(self, path: str | Path) -> None:
        tensors = {} if self.kind == "identity" else {"weights": self.weights, "bias": self.bias}
        save_tensors(path, tensors, {"kind": self.kind, "state_dim": self.state_dim,
                                     "latent_dim": self.latent_dim, "norm_bound": repr(self.norm_bound)})

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        tensors, meta = load_tensors(path)
        return cls(kind=meta["kind"], state_dim=int(meta["state_dim"]), latent_dim=int(meta["latent_dim"]),
                   weights=tensors.get("weights"), bias=tensors.get("bias"),
                   norm_bound=float(meta["norm_bound"]))


def clip_norm(z: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    scale = np.ones_like(norms)
    np.divide(bound, norms, out=scale, where=norms > bound)
    out = z * scale
    # rounding can leave the clipped norm a hair above the bound
    for _ in range(8):
        over = np.linalg.norm(out, axis=-1) > bound
        if not over.any():
            break
        out[over] *= 1.0 - 2.0 ** -50
    return out


def encode(e: Encoder, states) -> np.ndarray:
    s = np.asarray(states, dtype=float)
    if s.size == 0:
        return np.zeros((0, e.latent_dim))
    s = np.atleast_2d(s)
    if s.shape[-1] != e.state_dim:
        raise ValueError(f"state dimension {s.shape[-1]} does not match encoder input {e.state_dim}")
    z = s.copy() if e.kind == "identity" else s @ e.weights.T + e.bias
    return clip_norm(z, e.norm_bound)


def _fit_scale(w: np.ndarray, b: np.ndarray, states: np.ndarray, bound: float) -> tuple[np.ndarray, np.ndarray]:
    """Rescale the affine map so the fitting states land inside the ball of radius ``bound``."""
    radius = np.linalg.norm(states @ w.T + b, axis=1).max()
    c = bound / radius if radius > 0 else 1.0
    return w * c, b * c


def _rewards_to_go(d: Dataset, gamma: float) -> np.ndarray:
    out = []
    for traj in d.trajectories:
        g = np.zeros(len(traj))
        acc = 0.0
        for t in range(len(traj) - 1, -1, -1):
            acc = traj.rewards[t] + gamma * acc
            g[t] = acc
        out.append(g)
    return np.concatenate(out)


def fit_encoder(d_src: Dataset, d_tar: Dataset, cfg: FusionConfig, epochs: int = 60,
                batch: int = 64) -> Encoder:
    if d_src.state_dim != d_tar.state_dim:
        raise ConfigError("source and target datasets must share state_dim")
    n = d_src.state_dim
    kind = cfg.encoder_kind
    if kind == "identity":
        return Encoder("identity", n, n, norm_bound=cfg.norm_bound)
    latent = cfg.latent_dim or min(n, 8)
    if latent > n:
        raise ConfigError(f"latent_dim {latent} exceeds state_dim {n}")
    states = np.concatenate([d_src.flat["states"], d_tar.flat["states"]])
    mean = states.mean(axis=0)
    std = np.where(states.std(axis=0) > 1e-12, states.std(axis=0), 1.0)
    rng = np.random.default_rng(cfg.seed)

    if kind == "random_projection":
        q, _ = np.linalg.qr(rng.standard_normal((n, latent)))
        rows = q.T                                      # orthonormal rows
        w = rows / std
        w, b = _fit_scale(w, -w @ mean, states, cfg.norm_bound)
        return Encoder(kind, n, latent, w, b, cfg.norm_bound)

    # learned: linear encoder trained as an autoencoder with an auxiliary value head
    import torch

    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.as_tensor((states - mean) / std, dtype=torch.float64)
    returns = np.concatenate([_rewards_to_go(d_src, cfg.gamma), _rewards_to_go(d_tar, cfg.gamma)])
    y = torch.as_tensor((returns - returns.mean()) / (returns.std() + 1e-8), dtype=torch.float64)
    enc = torch.nn.Linear(n, latent, dtype=torch.float64)
    dec = torch.nn.Linear(latent, n, dtype=torch.float64)
    head = torch.nn.Linear(latent, 1, dtype=torch.float64)
    for mod in (enc, dec, head):
        torch.nn.init.normal_(mod.weight, std=1.0 / np.sqrt(mod.in_features), generator=gen)
        torch.nn.init.zeros_(mod.bias)
    params = [*enc.parameters(), *dec.parameters(), *head.parameters()]
    opt = torch.optim.Adam(params, lr=1e-2)
    history = []
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        losses = []
        for i in range(0, len(x), batch):
            idx = perm[i:i + batch]
            z = enc(x[idx])
            loss = ((dec(z) - x[idx]) ** 2).mean() + ((head(z).squeeze(-1) - y[idx]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    w = enc.weight.detach().numpy() / std
    b = enc.bias.detach().numpy() - w @ mean
    w, b = _fit_scale(w, b, states, cfg.norm_bound)
    log.debug("learned encoder loss %.4f -> %.4f", history[0], history[-1])
    return Encoder(kind, n, latent, w, b, cfg.norm_bound, tuple(history))
