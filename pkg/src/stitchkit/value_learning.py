"""Relabeling value pair, advantage tokens, and the command network.

All approximators are small ReLU perceptrons trained with Adam.  Source samples enter
the losses through the raw factor ``I_m * exp(eta_w * d_hat)`` carried by the batches.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import FusionConfig
from .datamodel import Dataset
from .fusion import SOURCE, TARGET, FusionSampler, TransitionBatch, sample_batch
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MLP(nn.Module):
    """ReLU perceptron; a single output is squeezed to a scalar per row unless ``squeeze=False``."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, depth: int = 2,
                 seed: int = 0, dtype=torch.float32, squeeze: bool = True):
        super().__init__()
        self.widths = (in_dim, *([hidden] * depth), out_dim)
        self.squeeze = squeeze and out_dim == 1
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            lin = nn.Linear(a, b, dtype=dtype)
            bound = 1.0 / np.sqrt(a)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            layers += [lin, nn.ReLU()]
        self.net = nn.Sequential(*layers[:-1])

    def forward(self, *xs: torch.Tensor) -> torch.Tensor:
        x = torch.cat(xs, dim=-1) if len(xs) > 1 else xs[0]
        out = self.net(x)
        return out.squeeze(-1) if self.squeeze else out


def flat_params(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def set_flat_params(module: nn.Module, vec) -> None:
    vec = torch.as_tensor(vec)
    i = 0
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(vec[i:i + p.numel()].view_as(p))
            i += p.numel()


def save_module(module: nn.Module, path: str | Path, **meta) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_tensors(path, tensors, meta)


def load_module(module: nn.Module, path: str | Path) -> nn.Module:
    tensors, _ = load_tensors(path)
    state = module.state_dict()
    module.load_state_dict({k: torch.as_tensor(tensors[k], dtype=state[k].dtype).reshape(state[k].shape)
                            for k in state})
    return module


def soft_update(online: nn.Module, target: nn.Module, eta: float) -> None:
    with torch.no_grad():
        for p, tp in zip(online.parameters(), target.parameters()):
            if p.shape != tp.shape:
                raise ValueError(f"parameter shape mismatch {tuple(p.shape)} vs {tuple(tp.shape)}")
            tp.mul_(1.0 - eta).add_(p, alpha=eta)


# -- losses ------------------------------------------------------------------

def als(u, zeta: float):
    """Asymmetric least squares ``|zeta - 1{u<0}| u^2`` (elementwise, numpy or torch)."""
    if isinstance(u, torch.Tensor):
        return torch.abs(zeta - (u < 0).to(u.dtype)) * u * u
    u = np.asarray(u, dtype=float)
    return np.abs(zeta - (u < 0)) * u * u


def expectile_loss(residuals, zeta: float):
    r = residuals if isinstance(residuals, torch.Tensor) else np.asarray(residuals, dtype=float)
    if len(r) == 0:
        return 0.0
    return als(r, zeta).mean()


def _mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else x.sum()


def split_weighted(per_sample: torch.Tensor, domain: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Target mean plus weighted source mean (each empty part contributes exactly zero)."""
    tar = per_sample[domain == TARGET]
    src = (weight * per_sample)[domain == SOURCE]
    return _mean(tar) + _mean(src)


@dataclass
class TorchBatch:
    s: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s2: torch.Tensor
    w: torch.Tensor
    domain: torch.Tensor

    @classmethod
    def of(cls, b: TransitionBatch, dtype=torch.float32) -> "TorchBatch":
        t = lambda x: torch.as_tensor(np.asarray(x), dtype=dtype)
        return cls(t(b.states), t(b.actions), t(b.rewards), t(b.next_states), t(b.loss_weight),
                   torch.as_tensor(b.domain))


def v_loss(v: nn.Module, v_next: nn.Module, b: TorchBatch, gamma: float, zeta: float) -> torch.Tensor:
    with torch.no_grad():
        boot = v_next(b.s2)
    delta = b.r + gamma * boot - v(b.s)
    return split_weighted(als(delta, zeta), b.domain, b.w)


def q_loss(q: nn.Module, v: nn.Module, b: TorchBatch, gamma: float) -> torch.Tensor:
    with torch.no_grad():
        boot = v(b.s2)
    delta = b.r + gamma * boot - q(b.s, b.a)
    return split_weighted(als(delta, 0.5), b.domain, b.w)


def _dtype(module: nn.Module):
    return next(module.parameters()).dtype


def _train(module: nn.Module, loss_fn, sampler: FusionSampler, cfg: FusionConfig, steps: int,
           seed: int, lr: float | None = None, after_step=None) -> list[float]:
    opt = torch.optim.Adam(module.parameters(), lr=lr or cfg.lr)
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=steps)
    dtype = _dtype(module)
    history: list[float] = []
    last_good = copy.deepcopy(module.state_dict())
    for step in range(steps):
        raw = sample_batch(sampler, cfg.batch_size, int(seeds[step]))
        loss = loss_fn(TorchBatch.of(raw, dtype), raw)
        if not torch.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}", last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if after_step is not None:
            after_step()
        history.append(loss.item())
        if step % 100 == 0:
            last_good = copy.deepcopy(module.state_dict())
    return history


def fit_V(sampler: FusionSampler, v: nn.Module, cfg: FusionConfig, steps: int | None = None,
          seed: int | None = None, lr: float | None = None) -> tuple[nn.Module, list[float]]:
    """Weighted expectile regression of the state value on one-step TD residuals."""
    v_next = copy.deepcopy(v).requires_grad_(False)
    hist = _train(v, lambda b, _: v_loss(v, v_next, b, cfg.gamma, cfg.zeta), sampler, cfg,
                  steps if steps is not None else cfg.value_steps, cfg.seed if seed is None else seed, lr,
                  after_step=lambda: soft_update(v, v_next, cfg.eta_exp))
    return v, hist


def fit_Q_adv(sampler: FusionSampler, v: nn.Module, q: nn.Module, cfg: FusionConfig,
              steps: int | None = None, seed: int | None = None, lr: float | None = None):
    """Weighted least squares (expectile 1/2) of Q on ``r + gamma V(s')`` with ``v`` frozen."""
    v = copy.deepcopy(v).requires_grad_(False)
    hist = _train(q, lambda b, _: q_loss(q, v, b, cfg.gamma), sampler, cfg,
                  steps if steps is not None else cfg.value_steps, (cfg.seed if seed is None else seed) + 1, lr)
    return q, hist


# -- advantage tokens --------------------------------------------------------

@dataclass(frozen=True)
class AdvantageTokens:
    A: np.ndarray
    A_tilde: np.ndarray
    mu: float
    sigma: float
    eps: float
    standardized: bool


def raw_advantages(d: Dataset, q: nn.Module, v: nn.Module) -> np.ndarray:
    dtype = _dtype(q)
    s = torch.tensor(d.flat["states"], dtype=dtype)
    a = torch.tensor(d.flat["actions"], dtype=dtype)
    with torch.no_grad():
        return (q(s, a) - v(s)).double().numpy()


def advantage_stats(values: np.ndarray) -> tuple[float, float]:
    return float(np.mean(values)), float(np.std(values))


def relabel_advantages(d: Dataset, q: nn.Module, v: nn.Module, standardize: bool = True,
                       eps: float = 1e-6, stats: tuple[float, float] | None = None) -> tuple[Dataset, AdvantageTokens]:
    """Attach advantage tokens ``A = Q(s,a) - V(s)`` (standardized if requested) as column ``A``."""
    A = raw_advantages(d, q, v)
    mu, sigma = stats if stats is not None else advantage_stats(A)
    A_tilde = (A - mu) / (sigma + eps)
    tokens = AdvantageTokens(A, A_tilde, mu, sigma, eps, standardize)
    return d.with_flat_column("A", A_tilde if standardize else A), tokens


# -- command network ---------------------------------------------------------

def command_loss(c: nn.Module, s: torch.Tensor, target: torch.Tensor, weight: torch.Tensor, zeta: float):
    return (weight * als(target - c(s), zeta)).mean()


def batch_tokens(sampler: FusionSampler, raw: TransitionBatch) -> np.ndarray:
    """Advantage tokens of the sampled rows, looked up in the originating datasets."""
    out = np.empty(len(raw))
    tar = raw.domain == TARGET
    out[tar] = sampler.target.flat["adv"][raw.index[tar]]
    if (~tar).any():
        out[~tar] = sampler.source.flat["adv"][raw.index[~tar]]
    return out


def fit_command(sampler: FusionSampler, c: nn.Module, cfg: FusionConfig, steps: int | None = None,
                seed: int | None = None, lr: float | None = None) -> tuple[nn.Module, list[float]]:
    """Fit ``C(s)`` to a high expectile of the advantage tokens over the fused pool."""
    dtype = _dtype(c)

    def loss_fn(b: TorchBatch, raw: TransitionBatch):
        tokens = torch.as_tensor(batch_tokens(sampler, raw), dtype=dtype)
        return command_loss(c, b.s, tokens, b.w, cfg.zeta_cmd)

    hist = _train(c, loss_fn, sampler, cfg, steps if steps is not None else cfg.command_steps,
                  (cfg.seed if seed is None else seed) + 2, lr)
    return c, hist


# -- scalar expectiles -------------------------------------------------------

def fit_scalar_expectile(y, zeta: float, weights=None, tol: float = 1e-13, max_iter: int = 200) -> float:
    """Minimise the weighted ALS risk over a constant by iteratively reweighted means."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    m = float(np.sum(w * y) / np.sum(w))
    for _ in range(max_iter):
        a = w * np.abs(zeta - (y < m))
        new = float(np.sum(a * y) / np.sum(a))
        if abs(new - m) <= tol * (1.0 + abs(m)):
            return new
        m = new
    return m
