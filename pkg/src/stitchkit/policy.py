"""Advantage-conditioned decision transformer with twin critics and a Q-regularized loss."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .config import FusionConfig
from .datamodel import Dataset, Trajectory
from .fusion import SOURCE, TARGET, FusionSampler, SequenceBatch, sample_sequences
from .value_learning import MLP, TrainingError, soft_update

log = logging.getLogger(__name__)


# -- backbone ----------------------------------------------------------------

class CausalSelfAttention(nn.Module):
    def __init__(self, embed: int, heads: int, dropout: float, dtype):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(embed, 3 * embed, dtype=dtype)
        self.proj = nn.Linear(embed, embed, dtype=dtype)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)
        q, k, v = (z.view(B, T, self.heads, C // self.heads).transpose(1, 2) for z in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads)
        att = att.masked_fill(~allowed[:, None], float("-inf"))
        att = self.drop(torch.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.drop(self.proj(y))


class Block(nn.Module):
    def __init__(self, embed: int, heads: int, dropout: float, dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed, dtype=dtype)
        self.attn = CausalSelfAttention(embed, heads, dropout, dtype)
        self.ln2 = nn.LayerNorm(embed, dtype=dtype)
        self.mlp = nn.Sequential(nn.Linear(embed, 4 * embed, dtype=dtype), nn.ReLU(),
                                 nn.Linear(4 * embed, embed, dtype=dtype), nn.Dropout(dropout))

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


class DecisionTransformer(nn.Module):
    """Tokens per step are (command, state, action); the action is read off the state token."""

    def __init__(self, state_dim: int, action_dim: int, context: int, embed: int = 64, layers: int = 2,
                 heads: int = 2, dropout: float = 0.1, max_timestep: int = 1024, seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        self.state_dim, self.action_dim, self.context = state_dim, action_dim, context
        self.max_timestep = max_timestep
        fork = torch.random.fork_rng()
        with fork:
            torch.manual_seed(seed)
            self.embed_state = nn.Linear(state_dim, embed, dtype=dtype)
            self.embed_action = nn.Linear(action_dim, embed, dtype=dtype)
            self.embed_command = nn.Linear(1, embed, dtype=dtype)
            self.embed_time = nn.Embedding(max_timestep, embed, dtype=dtype)
            self.ln_in = nn.LayerNorm(embed, dtype=dtype)
            self.blocks = nn.ModuleList(Block(embed, heads, dropout, dtype) for _ in range(layers))
            self.ln_out = nn.LayerNorm(embed, dtype=dtype)
            self.head = nn.Linear(embed, action_dim, dtype=dtype)
            self.drop = nn.Dropout(dropout)

    def forward(self, states, actions, commands, timesteps, masks) -> torch.Tensor:
        B, K, _ = states.shape
        t_emb = self.embed_time(timesteps.long().clamp(0, self.max_timestep - 1))
        tokens = torch.stack([
            self.embed_command(commands.unsqueeze(-1)) + t_emb,
            self.embed_state(states) + t_emb,
            self.embed_action(actions) + t_emb,
        ], dim=2).reshape(B, 3 * K, -1)
        x = self.drop(self.ln_in(tokens))
        valid = masks.bool().repeat_interleave(3, dim=1)
        causal = torch.ones(3 * K, 3 * K, dtype=torch.bool, device=x.device).tril()
        eye = torch.eye(3 * K, dtype=torch.bool, device=x.device)
        allowed = (causal[None] & valid[:, None, :]) | eye[None]
        for block in self.blocks:
            x = block(x, allowed)
        x = self.ln_out(x)
        return torch.tanh(self.head(x[:, 1::3]))


def make_policy(state_dim: int, action_dim: int, cfg: FusionConfig, max_timestep: int = 1024,
                dtype=torch.float32, seed: int | None = None) -> DecisionTransformer:
    return DecisionTransformer(state_dim, action_dim, cfg.context, cfg.embed_dim, cfg.n_layers, cfg.n_heads,
                               cfg.dropout, max_timestep, cfg.seed if seed is None else seed, dtype)


# -- critics -----------------------------------------------------------------

@dataclass
class CriticPair:
    q1: nn.Module
    q2: nn.Module
    q1_target: nn.Module
    q2_target: nn.Module

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden: int = 64, seed: int = 0, dtype=torch.float32):
        q1 = MLP(state_dim + action_dim, 1, hidden, seed=seed, dtype=dtype)
        q2 = MLP(state_dim + action_dim, 1, hidden, seed=seed + 1, dtype=dtype)
        return cls(q1, q2, copy.deepcopy(q1).requires_grad_(False), copy.deepcopy(q2).requires_grad_(False))

    def online(self):
        return (self.q1, self.q2)

    def parameters(self):
        return [*self.q1.parameters(), *self.q2.parameters()]

    def min_q(self, s, a):
        return torch.minimum(self.q1(s, a), self.q2(s, a))

    def min_target(self, s, a):
        return torch.minimum(self.q1_target(s, a), self.q2_target(s, a))

    def soft_update(self, eta: float) -> None:
        soft_update(self.q1, self.q1_target, eta)
        soft_update(self.q2, self.q2_target, eta)


def multistep_td_target(rewards, gamma: float, bootstrap: float, i: int, t: int) -> float:
    """``sum_{j=i}^{t-1} gamma^(j-i) r_j + gamma^(t-i) * bootstrap``."""
    if not 0 <= i < t or t > len(rewards):
        raise IndexError(f"need 0 <= i < t <= len(rewards); got i={i}, t={t}, len={len(rewards)}")
    total = 0.0
    for j in range(i, t):
        total += gamma ** (j - i) * rewards[j]
    return total + gamma ** (t - i) * bootstrap


def window_td_targets(rewards: torch.Tensor, bootstrap: torch.Tensor, gamma: float) -> torch.Tensor:
    """Multi-step targets for every position of a (B, K) reward window bootstrapped at the last step.

    Position ``K-1`` holds the bootstrap itself; earlier positions follow ``r_i + gamma * Q^_{i+1}``.
    """
    K = rewards.shape[1]
    out = [bootstrap]
    for i in range(K - 2, -1, -1):
        out.append(rewards[:, i] + gamma * out[-1])
    return torch.stack(out[::-1], dim=1)


# -- batches -----------------------------------------------------------------

@dataclass
class TorchSequences:
    states: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    adv: torch.Tensor
    timesteps: torch.Tensor
    masks: torch.Tensor
    weights: torch.Tensor
    domain: torch.Tensor

    @classmethod
    def of(cls, b: SequenceBatch, dtype=torch.float32) -> "TorchSequences":
        t = lambda x: torch.as_tensor(np.asarray(x), dtype=dtype)
        return cls(t(b.states), t(b.actions), t(b.rewards), t(b.adv), torch.as_tensor(b.timesteps),
                   t(b.masks), t(b.weights), torch.as_tensor(b.domain))

    def __len__(self):
        return len(self.domain)


def policy_forward(policy: nn.Module, b: TorchSequences) -> torch.Tensor:
    return policy(b.states, b.actions, b.adv, b.timesteps, b.masks)


def _mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else x.sum()


# -- losses ------------------------------------------------------------------

def critic_loss(b: TorchSequences, critics: CriticPair, target_policy: nn.Module, cfg: FusionConfig) -> torch.Tensor:
    """Twin-critic multi-step Bellman loss: target MSE plus gated, credibility-weighted source sum."""
    with torch.no_grad():
        a_hat = policy_forward(target_policy, b)[:, -1]
        boot = critics.min_target(b.states[:, -1], a_hat)
        q_hat = window_td_targets(b.rewards, boot, cfg.gamma)[:, :-1]
    valid = b.masks[:, :-1]
    tar, src = b.domain == TARGET, b.domain == SOURCE
    w = b.weights[:, :-1]
    total = b.rewards.new_zeros(())
    for q in critics.online():
        err = q_hat - q(b.states[:, :-1], b.actions[:, :-1])
        sq = err * err
        n_valid = valid[tar].sum()
        if n_valid > 0:
            total = total + (sq * valid)[tar].sum() / n_valid
        if src.any():
            scaled = (w * w * sq) if cfg.critic_weight_inside else (w * sq)
            total = total + (scaled * valid)[src].sum(dim=1).mean()
    return total


def dt_loss(b: TorchSequences, pred: torch.Tensor, cfg: FusionConfig) -> torch.Tensor:
    sq = ((pred - b.actions) ** 2).sum(-1)
    tar, src = b.domain == TARGET, b.domain == SOURCE
    total = sq.new_zeros(())
    n_valid = b.masks[tar].sum()
    if n_valid > 0:
        total = total + (sq * b.masks)[tar].sum() / n_valid
    if src.any():
        total = total + ((b.weights * sq)[src].sum(dim=1) / cfg.context).mean()
    return total


def q_regularizer(b: TorchSequences, pred: torch.Tensor, critics: CriticPair, cfg: FusionConfig) -> torch.Tensor:
    """Mean over sequences of ``(1/K) sum_i w_i Q(s_i, pi_i)`` (w is 1 on target steps, 0 on padding)."""
    q = critics.min_q(b.states, pred)
    return ((b.weights * b.masks * q).sum(dim=1) / cfg.context).mean()


def gaussian_kl(mu_p, std_p, mu_q, std_q) -> torch.Tensor:
    """KL(N(mu_p, std_p^2) || N(mu_q, std_q^2)) summed over the last axis."""
    var_p, var_q = std_p ** 2, std_q ** 2
    return (torch.log(std_q / std_p) + (var_p + (mu_p - mu_q) ** 2) / (2 * var_q) - 0.5).sum(-1)


class BehaviorModel(nn.Module):
    """Diagonal Gaussian behavior cloning model of the target data."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int = 64, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.mean = MLP(state_dim, action_dim, hidden, seed=seed, dtype=dtype, squeeze=False)
        self.log_std = nn.Parameter(torch.full((action_dim,), -1.0, dtype=dtype))

    def forward(self, s):
        return torch.tanh(self.mean(s)), self.log_std.exp().expand(*s.shape[:-1], -1)


def fit_behavior(tar: Dataset, cfg: FusionConfig, steps: int | None = None, dtype=torch.float32) -> BehaviorModel:
    model = BehaviorModel(tar.state_dim, tar.action_dim, cfg.hidden, seed=cfg.seed + 7, dtype=dtype)
    s = torch.tensor(tar.flat["states"], dtype=dtype)
    a = torch.tensor(tar.flat["actions"], dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    rng = np.random.default_rng(cfg.seed + 7)
    for _ in range(cfg.bc_steps if steps is None else steps):
        idx = torch.as_tensor(rng.integers(0, len(s), size=min(256, len(s))))
        mu, std = model(s[idx])
        nll = (((a[idx] - mu) / std) ** 2 / 2 + torch.log(std)).sum(-1).mean()
        opt.zero_grad()
        nll.backward()
        opt.step()
    return model.requires_grad_(False)


def kl_to_behavior(b: TorchSequences, pred: torch.Tensor, behavior: nn.Module, cfg: FusionConfig) -> torch.Tensor:
    mu_t, std_t = behavior(b.states)
    kl = gaussian_kl(pred, torch.full_like(pred, cfg.policy_std), mu_t, std_t)
    return (kl * b.masks).sum() / b.masks.sum().clamp(min=1.0)


@dataclass
class PolicyLoss:
    total: torch.Tensor
    dt: float
    q_reg: float
    kl: float


def policy_loss(b: TorchSequences, policy: nn.Module, critics: CriticPair | None, behavior: nn.Module | None,
                cfg: FusionConfig) -> PolicyLoss:
    pred = policy_forward(policy, b)
    bc = dt_loss(b, pred, cfg)
    total = bc
    q_val = kl = 0.0
    if cfg.alpha > 0 and critics is not None:
        q_reg = q_regularizer(b, pred, critics, cfg)
        total = total - cfg.alpha * q_reg
        q_val = q_reg.item()
    if cfg.eta_reg > 0 and behavior is not None:
        kl_t = kl_to_behavior(b, pred, behavior, cfg)
        total = total + cfg.eta_reg * kl_t
        kl = kl_t.item()
    return PolicyLoss(total, bc.item(), q_val, kl)


def critic_step(b: TorchSequences, critics: CriticPair, target_policy: nn.Module, cfg: FusionConfig,
                optimizer: torch.optim.Optimizer) -> float:
    loss = critic_loss(b, critics, target_policy, cfg)
    if not torch.isfinite(loss):
        raise TrainingError("critic loss became non-finite")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def policy_step(b: TorchSequences, policy: nn.Module, critics: CriticPair | None, behavior: nn.Module | None,
                cfg: FusionConfig, optimizer: torch.optim.Optimizer) -> PolicyLoss:
    if critics is not None:
        for q in critics.online():
            q.requires_grad_(False)
    try:
        out = policy_loss(b, policy, critics, behavior, cfg)
        if not torch.isfinite(out.total):
            raise TrainingError("policy loss became non-finite")
        optimizer.zero_grad()
        out.total.backward()
        optimizer.step()
    finally:
        if critics is not None:
            for q in critics.online():
                q.requires_grad_(True)
    return out


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    policy: DecisionTransformer
    critics: CriticPair
    history: list[dict] = field(default_factory=list)


def train(sampler: FusionSampler, cfg: FusionConfig, behavior: nn.Module | None = None,
          max_timestep: int = 1024, steps: int | None = None, dtype=torch.float32,
          on_checkpoint: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Alternate one critic step, soft target updates, and one policy step per iteration."""
    n, m = sampler.target.state_dim, sampler.target.action_dim
    torch.manual_seed(cfg.seed)
    policy = make_policy(n, m, cfg, max_timestep, dtype)
    target_policy = copy.deepcopy(policy).requires_grad_(False).eval()
    critics = CriticPair.create(n, m, cfg.hidden, seed=cfg.seed + 100, dtype=dtype)
    pi_opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    q_opt = torch.optim.Adam(critics.parameters(), lr=cfg.lr)
    n_steps = cfg.train_steps if steps is None else steps
    seeds = np.random.default_rng(cfg.seed + 11).integers(0, 2**31 - 1, size=n_steps)
    result = TrainResult(policy, critics)
    policy.train()
    for step in range(n_steps):
        b = TorchSequences.of(sample_sequences(sampler, cfg.batch_size, cfg.context, int(seeds[step])), dtype)
        q_loss = critic_step(b, critics, target_policy, cfg, q_opt)
        critics.soft_update(cfg.eta_exp)
        out = policy_step(b, policy, critics, behavior, cfg, pi_opt)
        soft_update(policy, target_policy, cfg.eta_exp)
        result.history.append({"step": step, "critic": q_loss, "dt": out.dt, "q_reg": out.q_reg,
                               "kl": out.kl, "policy": out.total.item()})
        if on_checkpoint is not None and (step + 1) % cfg.checkpoint_every == 0:
            policy.eval()
            on_checkpoint(step + 1, result)
            policy.train()
    policy.eval()
    return result


# -- inference ---------------------------------------------------------------

class Actor:
    """Rolling-context inference driven by command tokens from ``C(s)``.

    Runs ``n_envs`` episodes in lockstep; each row keeps its own K-step buffers.
    """

    def __init__(self, policy: DecisionTransformer, command_net: nn.Module, standardized: bool = True,
                 stats: tuple[float, float] = (0.0, 1.0), eps: float = 1e-6, n_envs: int = 1):
        self.policy, self.command_net = policy.eval(), command_net
        self.standardized, self.stats, self.eps = standardized, stats, eps
        self.dtype = next(policy.parameters()).dtype
        self.K = policy.context
        self.reset(n_envs)

    def reset(self, n_envs: int | None = None) -> None:
        n = n_envs or self.n_envs
        self.n_envs = n
        K, sd, ad = self.K, self.policy.state_dim, self.policy.action_dim
        self.S = np.zeros((n, K, sd))
        self.A = np.zeros((n, K, ad))        # slot K-1 (current action) stays zero
        self.C = np.zeros((n, K))
        self.T = np.zeros((n, K), dtype=np.int64)
        self.M = np.zeros((n, K))
        self.t = 0

    def command(self, states: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            raw = self.command_net(torch.as_tensor(states, dtype=self.dtype)).double().numpy()
        if self.standardized:
            return raw
        mu, sigma = self.stats
        return (raw - mu) / (sigma + self.eps)

    def act(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape != (self.n_envs, self.policy.state_dim):
            raise ValueError(f"expected states of shape {(self.n_envs, self.policy.state_dim)}, got {states.shape}")
        c = np.reshape(self.command(states), (self.n_envs,))
        for buf in (self.S, self.C, self.T, self.M):
            buf[:, :-1] = buf[:, 1:]
        self.S[:, -1], self.C[:, -1], self.T[:, -1], self.M[:, -1] = states, c, self.t, 1.0
        t = lambda x, dt=self.dtype: torch.as_tensor(x, dtype=dt)
        with torch.no_grad():
            out = self.policy(t(self.S), t(self.A), t(self.C), torch.as_tensor(self.T), t(self.M))
        action = out[:, -1].double().numpy()
        self.A[:, :-2] = self.A[:, 1:-1]
        if self.K > 1:
            self.A[:, -2] = action
        self.t += 1
        return action


def run_episodes(envs, actor: Actor) -> tuple[list[Trajectory], np.ndarray]:
    """Roll all ``envs`` in lockstep until every one terminates."""
    actor.reset(len(envs))
    states = np.stack([env.reset() for env in envs])
    live = np.ones(len(envs), dtype=bool)
    logs = [dict(s=[], a=[], r=[], s2=[]) for _ in envs]
    step = 0
    while live.any():
        actions = actor.act(states)
        for i, env in enumerate(envs):
            if not live[i]:
                continue
            try:
                r, s2, done = env.step(actions[i])
            except Exception as exc:
                raise RuntimeError(f"environment {i} failed at step {step}: {exc}") from exc
            logs[i]["s"].append(states[i].copy())
            logs[i]["a"].append(np.asarray(env.last_action if hasattr(env, "last_action") else actions[i]))
            logs[i]["r"].append(r)
            logs[i]["s2"].append(s2)
            states[i] = s2
            live[i] = not done
        step += 1
    trajs = [Trajectory(states=lg["s"], actions=lg["a"], rewards=lg["r"], next_states=lg["s2"],
                        timesteps=np.arange(len(lg["r"])), masks=np.ones(len(lg["r"])), domain="target")
             for lg in logs]
    return trajs, np.array([float(np.sum(lg["r"])) for lg in logs])


def run_episode(env, policy: DecisionTransformer, command_net: nn.Module, standardized: bool = True,
                stats: tuple[float, float] = (0.0, 1.0), eps: float = 1e-6) -> tuple[Trajectory, float]:
    trajs, returns = run_episodes([env], Actor(policy, command_net, standardized, stats, eps))
    return trajs[0], float(returns[0])
