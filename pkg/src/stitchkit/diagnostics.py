"""Junction-stability metrics, the normalized score, and the fusion-deviation bound check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .fusion import SequenceBatch
from .ot_credibility import build_cost, exact_ot


class UndefinedScoreError(ZeroDivisionError):
    pass


class PoolSizeError(ValueError):
    pass


@dataclass
class JunctionReport:
    J_a: float
    J_Q: float
    td_residual: float
    series: dict[str, list[float]] = field(default_factory=lambda: {"step": [], "J_a": [], "J_Q": [], "td_residual": []})

    def record(self, step: int, J_a: float, J_Q: float, td: float) -> None:
        for key, value in (("step", step), ("J_a", J_a), ("J_Q", J_Q), ("td_residual", td)):
            self.series[key].append(value)
        self.J_a, self.J_Q, self.td_residual = J_a, J_Q, td


def _junction_pairs(junctions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(np.asarray(junctions, dtype=bool))
    if rows.size == 0:
        raise ValueError("junction set is empty")
    if np.any(cols < 1):
        raise ValueError("a junction at position 0 has no predecessor")
    return rows, cols


def action_jump(actions: np.ndarray, junctions: np.ndarray) -> float:
    """Mean ``||pi(s_t*) - pi(s_t*-1)||`` over junctions; ``actions`` is (B, T, m)."""
    rows, cols = _junction_pairs(junctions)
    a = np.asarray(actions, dtype=float)
    return float(np.mean(np.linalg.norm(a[rows, cols] - a[rows, cols - 1], axis=-1)))


def q_jump(q_values: np.ndarray, junctions: np.ndarray) -> float:
    """Mean ``|Q(s_t*, pi(s_t*)) - Q(s_t*-1, pi(s_t*-1))|`` over junctions; ``q_values`` is (B, T)."""
    rows, cols = _junction_pairs(junctions)
    q = np.asarray(q_values, dtype=float)
    return float(np.mean(np.abs(q[rows, cols] - q[rows, cols - 1])))


def td_residual_window(v: Callable, states: np.ndarray, rewards: np.ndarray, t_star: int,
                       gamma: float = 0.99, w: int = 2) -> float:
    """Mean ``|r_t + gamma V(s_t+1) - V(s_t)|`` over ``|t - t*| <= w`` clipped to steps with a successor."""
    states = np.asarray(states, dtype=float)
    T = len(states)
    window = [t for t in range(t_star - w, t_star + w + 1) if 0 <= t <= T - 2]
    if not window:
        raise ValueError(f"window around t*={t_star} (w={w}) has no step with a successor in a length-{T} sequence")
    idx = np.array(window)
    values = np.asarray(v(states), dtype=float).reshape(T)
    resid = np.asarray(rewards, dtype=float)[idx] + gamma * values[idx + 1] - values[idx]
    return float(np.mean(np.abs(resid)))


def normalized_score(J: float, J_rand: float, J_exp: float) -> float:
    if J_exp == J_rand:
        raise UndefinedScoreError("normalized score is undefined when J_exp == J_rand")
    return (J - J_rand) / (J_exp - J_rand) * 100.0


def moving_average(x, window: int = 5) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


# -- model adapters ----------------------------------------------------------

def sliding_policy_actions(policy, batch: SequenceBatch, context: int) -> np.ndarray:
    """``pi(s_t)`` at every position, each evaluated on the K-window ending at t."""
    B, T = batch.masks.shape
    dtype = next(policy.parameters()).dtype
    out = np.zeros((B, T, batch.actions.shape[-1]))
    t = lambda x: torch.as_tensor(x, dtype=dtype)
    with torch.no_grad():
        for end in range(T):
            lo = max(0, end - context + 1)
            pad = context - (end + 1 - lo)
            sl = slice(lo, end + 1)
            S = np.concatenate([np.zeros((B, pad, batch.states.shape[-1])), batch.states[:, sl]], axis=1)
            A = np.concatenate([np.zeros((B, pad, batch.actions.shape[-1])), batch.actions[:, sl]], axis=1)
            C = np.concatenate([np.zeros((B, pad)), batch.adv[:, sl]], axis=1)
            Ts = np.concatenate([np.zeros((B, pad), dtype=np.int64), batch.timesteps[:, sl]], axis=1)
            M = np.concatenate([np.zeros((B, pad)), batch.masks[:, sl]], axis=1)
            pred = policy(t(S), t(A), t(C), torch.as_tensor(Ts), t(M))
            out[:, end] = pred[:, -1].double().numpy()
    return out


def critic_values(critics, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    dtype = next(critics.q1.parameters()).dtype
    with torch.no_grad():
        q = critics.min_q(torch.as_tensor(states, dtype=dtype), torch.as_tensor(actions, dtype=dtype))
    return q.double().numpy()


def junction_report(policy, critics, v: Callable, batch: SequenceBatch, context: int, gamma: float,
                    w: int = 2) -> tuple[float, float, float]:
    actions = sliding_policy_actions(policy, batch, context)
    q = critic_values(critics, batch.states, actions)
    J_a = action_jump(actions, batch.junctions)
    J_Q = q_jump(q, batch.junctions)
    rows, cols = _junction_pairs(batch.junctions)
    td = float(np.mean([td_residual_window(v, batch.states[r], batch.rewards[r], c, gamma, w)
                        for r, c in zip(rows, cols)]))
    return J_a, J_Q, td


# -- fusion deviation bound --------------------------------------------------

@dataclass(frozen=True)
class BoundReport:
    delta_w: float
    beta: float
    deviations: np.ndarray
    max_slack: float            # max over g of deviation - beta * delta_w (<= 0 when the bound holds)
    violations: int


def weighted_w1(src_atoms, src_weights, tar_atoms) -> float:
    """Exact W1 between the weighted source atoms and the uniform target atoms (euclidean cost)."""
    p = np.asarray(src_weights, dtype=float)
    p = p / p.sum()
    q = np.full(len(tar_atoms), 1.0 / len(tar_atoms))
    return exact_ot(build_cost(src_atoms, tar_atoms, "euclidean"), p, q).objective


def lemma1_check(src_atoms, tar_atoms, gate, weights, beta: float, trials: int = 100, seed: int = 0,
                 max_atoms: int = 64, tol: float = 1e-8) -> BoundReport:
    """Check ``|E_mix g - E_T g| <= beta * W1(P_S^w, P_T)`` for random unit-direction linear ``g``."""
    src = np.atleast_2d(np.asarray(src_atoms, dtype=float))
    tar = np.atleast_2d(np.asarray(tar_atoms, dtype=float))
    if len(src) > max_atoms or len(tar) > max_atoms:
        raise PoolSizeError(f"pools of {len(src)} and {len(tar)} atoms exceed the exact-solver limit {max_atoms}")
    keep = np.asarray(gate, dtype=bool)
    w = np.asarray(weights, dtype=float)[keep]
    src = src[keep]
    if src.size == 0 or w.sum() <= 0:
        raise ValueError("gated source pool carries no mass")
    w = w / w.sum()
    delta = weighted_w1(src, w, tar)
    dirs = np.random.default_rng(seed).standard_normal((trials, src.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    e_t = (tar @ dirs.T).mean(axis=0)
    e_s = w @ (src @ dirs.T)
    e_mix = (1.0 - beta) * e_t + beta * e_s
    dev = np.abs(e_mix - e_t)
    slack = dev - beta * delta
    return BoundReport(delta, beta, dev, float(slack.max()), int(np.sum(slack > tol)))
