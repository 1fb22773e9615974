"""Action credibility from optimal transport between source and target transition vectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from .config import FusionConfig
from .datamodel import Dataset, Transition

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, violation: float):
        super().__init__(f"{message} (marginal violation {violation:.3e})")
        self.violation = violation


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    cost: np.ndarray
    objective: float


@dataclass(frozen=True)
class CredibilityScores:
    d_w: np.ndarray
    d_w_hat: np.ndarray
    weights: np.ndarray


def transition_vectors(items) -> np.ndarray:
    """Stack ``s (+) a (+) r (+) s'`` for a Dataset, a list of Transitions, or pass arrays through."""
    if isinstance(items, Dataset):
        f = items.flat
        return np.hstack([f["states"], f["actions"], f["rewards"][:, None], f["next_states"]])
    items = list(items)
    if items and isinstance(items[0], Transition):
        return np.stack([np.concatenate([np.ravel(t.state), np.ravel(t.action), [t.reward], np.ravel(t.next_state)])
                         for t in items])
    return np.atleast_2d(np.asarray(items, dtype=float))


def build_cost(src, tar, cost_kind: str = "cosine") -> np.ndarray:
    vs, vt = transition_vectors(src), transition_vectors(tar)
    if vs.shape[1] != vt.shape[1]:
        raise ValueError(f"vector dimensions differ: {vs.shape[1]} vs {vt.shape[1]}")
    if cost_kind == "euclidean":
        sq = (vs * vs).sum(1)[:, None] + (vt * vt).sum(1)[None, :] - 2.0 * vs @ vt.T
        cost = np.sqrt(np.maximum(sq, 0.0))
        # exact zeros for identical rows, which the expanded form can miss
        same = sq <= 1e-12 * (1.0 + (vs * vs).sum(1)[:, None] + (vt * vt).sum(1)[None, :])
        if same.any():
            rows, cols = np.nonzero(same)
            cost[rows, cols] = np.linalg.norm(vs[rows] - vt[cols], axis=1)
        return cost
    if cost_kind != "cosine":
        raise ValueError(f"unknown cost kind {cost_kind!r}")
    ns, nt = np.linalg.norm(vs, axis=1), np.linalg.norm(vt, axis=1)
    zero = (ns[:, None] == 0) | (nt[None, :] == 0)
    if zero.any():
        log.warning("%d zero-norm vector pairs under cosine cost; using cost 1", int(zero.sum()))
    denom = np.where(zero, 1.0, ns[:, None] * nt[None, :])
    cos = np.clip((vs @ vt.T) / denom, -1.0, 1.0)
    return np.where(zero, 1.0, 1.0 - cos)


def round_to_marginals(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto the transport polytope (Altschuler et al. rounding)."""
    p = np.maximum(p, 0.0)
    rows = p.sum(1)
    p = p * np.minimum(1.0, a / np.where(rows > 0, rows, 1.0))[:, None]
    cols = p.sum(0)
    p = p * np.minimum(1.0, b / np.where(cols > 0, cols, 1.0))[None, :]
    err_a, err_b = a - p.sum(1), b - p.sum(0)
    mass = err_a.sum()
    if mass > 0:
        p = p + np.outer(err_a, err_b) / mass
    return p


def _exact(cost: np.ndarray) -> np.ndarray:
    n, m = cost.shape
    if n == m:
        rows, cols = linear_sum_assignment(cost)
        plan = np.zeros_like(cost)
        plan[rows, cols] = 1.0 / n
        return plan
    return exact_ot(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m)).coupling


def exact_ot(cost, a, b) -> TransportPlan:
    """Exact transport LP with arbitrary marginals ``a`` (rows) and ``b`` (columns)."""
    c = np.atleast_2d(np.asarray(cost, dtype=float))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n, m = c.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError(f"marginal shapes {a.shape}, {b.shape} do not fit cost {c.shape}")
    if np.any(a < 0) or np.any(b < 0) or not np.isclose(a.sum(), b.sum()):
        raise ValueError("marginals must be nonnegative with equal mass")
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = round_to_marginals(res.x.reshape(n, m), a, b)
    return TransportPlan(plan, c, float((c * plan).sum()))


def sinkhorn(cost: np.ndarray, eps: float, max_iter: int = 20000, tol: float = 1e-9) -> np.ndarray:
    """Log-domain Sinkhorn with uniform marginals; the result is rounded to exact feasibility."""
    n, m = cost.shape
    log_a, log_b = np.full(n, -np.log(n)), np.full(m, -np.log(m))
    f, g = np.zeros(n), np.zeros(m)
    violation = np.inf
    for it in range(max_iter):
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
        if it % 10 == 0 or it == max_iter - 1:
            plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
            violation = np.abs(plan.sum(1) - np.exp(log_a)).sum()
            if violation < tol:
                break
    else:
        raise ConvergenceError(f"sinkhorn did not converge in {max_iter} iterations", violation)
    return round_to_marginals(plan, np.exp(log_a), np.exp(log_b))


def solve_ot(cost, method: str = "exact", eps: float = 0.01, **kwargs) -> TransportPlan:
    c = np.atleast_2d(np.asarray(cost, dtype=float))
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("cost matrix must be finite and nonnegative")
    if method == "exact":
        plan = _exact(c)
    elif method == "sinkhorn":
        plan = sinkhorn(c, eps, **kwargs)
    else:
        raise ValueError(f"unknown OT method {method!r}")
    return TransportPlan(plan, c, float((c * plan).sum()))


def deviation(plan: TransportPlan) -> np.ndarray:
    return -(plan.cost * plan.coupling).sum(axis=1)


def normalize_and_weight(d_w, eta_w: float) -> CredibilityScores:
    d = np.asarray(d_w, dtype=float)
    if d.size == 0:
        raise ValueError("empty deviation list")
    hi, lo = d.max(), d.min()
    if hi == lo:
        d_hat = np.zeros_like(d)
    else:
        d_hat = np.clip((d - hi) / (hi - lo), -1.0, 0.0)
    weights = np.clip(np.exp(eta_w * d_hat), np.exp(-eta_w), 1.0)
    return CredibilityScores(d, d_hat, weights)


def _standardize(vs: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pooled = np.vstack([vs, vt])
    mean, std = pooled.mean(0), pooled.std(0)
    std = np.where(std > 1e-12, std, 1.0)
    return (vs - mean) / std, (vt - mean) / std


def score_transitions(src: Dataset, tar: Dataset, cfg: FusionConfig) -> tuple[Dataset, CredibilityScores]:
    """Attach ``d_w`` to every source transition.

    Source rows are solved in fixed chunks of ``cfg.ot_chunk_size`` against the whole
    target set when the full problem exceeds ``cfg.ot_exact_max_entries``; each chunk's
    deviations are rescaled by ``chunk/|src|`` so every row carries the same mass as in
    the unchunked problem.
    """
    vs, vt = transition_vectors(src), transition_vectors(tar)
    if cfg.ot_standardize:
        vs, vt = _standardize(vs, vt)
    n = len(vs)
    whole = n * len(vt) <= cfg.ot_exact_max_entries
    bounds = [(0, n)] if whole else [(i, min(i + cfg.ot_chunk_size, n)) for i in range(0, n, cfg.ot_chunk_size)]
    d_w = np.empty(n)
    for lo, hi in bounds:
        cost = build_cost(vs[lo:hi], vt, cfg.ot_cost)
        method = cfg.ot_method
        if method == "auto":
            method = "exact" if cost.size <= cfg.ot_exact_max_entries else "sinkhorn"
        plan = solve_ot(cost, method, cfg.sinkhorn_eps, tol=1e-6)
        d_w[lo:hi] = deviation(plan) * (hi - lo) / n
    d_w = np.minimum(d_w, 0.0)
    scores = normalize_and_weight(d_w, cfg.eta_w)
    log.info("ot credibility: %d source rows in %d chunk(s), weight range [%.3f, %.3f]",
             n, len(bounds), scores.weights.min(), scores.weights.max())
    return src.with_flat_column("d_w", d_w), scores
