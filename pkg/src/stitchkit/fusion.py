"""Feasibility-weighted fusion of target data with gated, credibility-weighted source data."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ConfigError, FusionConfig
from .datamodel import Dataset, Transition
from .mmd_filter import gate_from_column
from .ot_credibility import normalize_and_weight

log = logging.getLogger(__name__)

TARGET, SOURCE = 0, 1


@dataclass(frozen=True, eq=False)
class FusionSampler:
    target: Dataset
    source: Dataset | None
    beta: float
    gate: np.ndarray            # per source transition, I_m
    d_w_hat: np.ndarray         # per source transition
    raw_weight: np.ndarray      # I_m * exp(eta_w * d_w_hat)
    w_tilde: np.ndarray         # raw_weight / mean over the gated pool
    pool: np.ndarray            # flat indices of gated source transitions
    cfg: FusionConfig

    @property
    def has_source(self) -> bool:
        return self.source is not None and self.pool.size > 0 and self.beta > 0


@dataclass(frozen=True)
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    weight: np.ndarray          # w~ for source draws, 1 for target draws
    loss_weight: np.ndarray     # per-sample factor entering the losses
    domain: np.ndarray          # TARGET / SOURCE
    index: np.ndarray           # flat index into the originating dataset

    def __len__(self) -> int:
        return len(self.rewards)

    def items(self):
        for i in range(len(self)):
            tr = Transition(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i], 0)
            yield tr, float(self.weight[i]), "source" if self.domain[i] == SOURCE else "target"


@dataclass(frozen=True)
class SequenceBatch:
    """Left-padded K-step windows; padding rows are zero with mask 0."""

    states: np.ndarray          # (B, K, n)
    actions: np.ndarray         # (B, K, m)
    rewards: np.ndarray         # (B, K)
    adv: np.ndarray             # (B, K)
    timesteps: np.ndarray       # (B, K)
    masks: np.ndarray           # (B, K)
    weights: np.ndarray         # (B, K) loss factor: 1 on target steps, I_m * exp(eta_w d^) on source steps
    domain: np.ndarray          # (B,)
    junctions: np.ndarray | None = None   # (B, K) bool, stitch boundary at this step

    def __len__(self) -> int:
        return len(self.domain)

    def select(self, rows) -> "SequenceBatch":
        return SequenceBatch(*(None if v is None else v[rows] for v in (
            self.states, self.actions, self.rewards, self.adv, self.timesteps, self.masks,
            self.weights, self.domain, self.junctions)))


def build_sampler(tar: Dataset, src_scored: Dataset | None, cfg: FusionConfig) -> FusionSampler:
    empty = np.zeros(0)
    if src_scored is None or cfg.beta == 0:
        return FusionSampler(tar, src_scored, 0.0 if src_scored is None else cfg.beta,
                             empty.astype(bool), empty, empty, empty, empty.astype(np.int64), cfg)
    n_src = src_scored.n_transitions
    if cfg.xi_percent >= 100:
        indicator = np.ones(n_src, dtype=bool)
    else:
        if not src_scored.has_column("d_m"):
            raise ConfigError("source dataset carries no d_m column; run the MMD scoring stage")
        _, _, indicator = gate_from_column(src_scored, cfg)
    if cfg.use_ot_weights:
        if not src_scored.has_column("d_w"):
            raise ConfigError("source dataset carries no d_w column; run the OT scoring stage")
        d_hat = normalize_and_weight(src_scored.flat["d_w"], cfg.eta_w).d_w_hat
    else:
        d_hat = np.zeros(n_src)
    raw = indicator * np.exp(cfg.eta_w * d_hat)
    pool = np.flatnonzero(indicator)
    if pool.size == 0:
        raise ConfigError(f"gated source pool is empty at xi={cfg.xi_percent}%; use a larger xi")
    w_tilde = raw / raw[pool].mean()
    return FusionSampler(tar, src_scored, cfg.beta, indicator, d_hat, raw, w_tilde, pool, cfg)


def split_counts(beta: float, n: int) -> tuple[int, int]:
    n_tar = math.floor((1.0 - beta) * n + 1e-9)
    return n_tar, n - n_tar


def _source_draws(s: FusionSampler, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mode = s.cfg.weight_mode
    if mode == "weight":
        idx = s.pool[rng.integers(0, s.pool.size, size=n)]
        return idx, s.w_tilde[idx], s.raw_weight[idx]
    p = s.w_tilde[s.pool] / s.w_tilde[s.pool].sum()
    idx = s.pool[rng.choice(s.pool.size, size=n, p=p)]
    if mode == "resample":
        return idx, np.ones(n), np.ones(n)
    return idx, s.w_tilde[idx], s.raw_weight[idx]


def sample_batch(s: FusionSampler, n: int, seed: int) -> TransitionBatch:
    rng = np.random.default_rng(seed)
    n_tar, n_src = split_counts(s.beta, n)
    if n_src and not s.has_source:
        raise ConfigError("beta > 0 but the gated source pool is empty")
    if n_tar and s.target.n_transitions == 0:
        raise ConfigError("target pool is empty")
    tf = s.target.flat
    t_idx = rng.integers(0, s.target.n_transitions, size=n_tar)
    parts = [(tf, t_idx, np.ones(n_tar), np.ones(n_tar), TARGET)]
    if n_src:
        s_idx, w, lw = _source_draws(s, n_src, rng)
        parts.append((s.source.flat, s_idx, w, lw, SOURCE))
    cat = lambda key: np.concatenate([f[key][i] for f, i, *_ in parts]) if parts else np.zeros(0)
    return TransitionBatch(
        states=cat("states"), actions=cat("actions"), rewards=cat("rewards"), next_states=cat("next_states"),
        weight=np.concatenate([p[2] for p in parts]), loss_weight=np.concatenate([p[3] for p in parts]),
        domain=np.concatenate([np.full(len(p[1]), p[4]) for p in parts]),
        index=np.concatenate([p[1] for p in parts]))


def triples(d: Dataset) -> np.ndarray:
    f = d.flat
    return np.hstack([f["states"], f["actions"], f["next_states"]])


def empirical_mix_expectation(s: FusionSampler, g: Callable[[np.ndarray], np.ndarray]) -> float:
    """Exact ``(1-beta) E_T[g] + beta E_{S,w~}[g]`` over the pools, ``g`` acting on stacked (s, a, s') rows."""
    e_t = float(np.mean(g(triples(s.target))))
    if not s.has_source:
        return e_t
    u_s = triples(s.source)[s.pool]
    w = s.w_tilde[s.pool]
    e_s = float(np.sum(w * g(u_s)) / np.sum(w))
    return (1.0 - s.beta) * e_t + s.beta * e_s


# -- sequence windows --------------------------------------------------------

def _flat_offsets(d: Dataset) -> np.ndarray:
    return np.cumsum([0] + [len(t) for t in d.trajectories])


def _window(d: Dataset, flat_end: int, k: int, allowed: np.ndarray | None) -> np.ndarray:
    """Flat indices of the (up to) k steps ending at ``flat_end`` inside one trajectory.

    With ``allowed`` the window stops at the first disallowed step going backwards.
    """
    f = d.flat
    step = int(f["step"][flat_end])
    first = flat_end - min(step, k - 1)
    idx = np.arange(first, flat_end + 1)
    if allowed is not None:
        bad = np.flatnonzero(~allowed[idx])
        if bad.size:
            idx = idx[bad[-1] + 1:]
    return idx


def _fill(d: Dataset, windows, k: int, weights_fn) -> dict[str, np.ndarray]:
    f = d.flat
    b, n, m = len(windows), d.state_dim, d.action_dim
    out = {
        "states": np.zeros((b, k, n)), "actions": np.zeros((b, k, m)), "rewards": np.zeros((b, k)),
        "adv": np.zeros((b, k)), "timesteps": np.zeros((b, k), dtype=np.int64),
        "masks": np.zeros((b, k)), "weights": np.zeros((b, k)),
    }
    adv = f.get("adv")
    for row, idx in enumerate(windows):
        sl = slice(k - len(idx), k)
        out["states"][row, sl] = f["states"][idx]
        out["actions"][row, sl] = f["actions"][idx]
        out["rewards"][row, sl] = f["rewards"][idx]
        out["timesteps"][row, sl] = f["timesteps"][idx]
        out["masks"][row, sl] = 1.0
        out["weights"][row, sl] = weights_fn(idx)
        if adv is not None:
            out["adv"][row, sl] = adv[idx]
    return out


def sample_sequences(s: FusionSampler, n: int, k: int, seed: int) -> SequenceBatch:
    """Draw ``n`` windows split by beta; source windows stay inside contiguous gated steps."""
    rng = np.random.default_rng(seed)
    n_tar, n_src = split_counts(s.beta, n)
    if n_src and not s.has_source:
        raise ConfigError("beta > 0 but the gated source pool is empty")
    t_end = rng.integers(0, s.target.n_transitions, size=n_tar)
    tw = [_window(s.target, int(j), k, None) for j in t_end]
    fields = _fill(s.target, tw, k, lambda idx: 1.0)
    domain = [np.full(n_tar, TARGET)]
    if n_src:
        s_end, _, _ = _source_draws(s, n_src, rng)
        sw = [_window(s.source, int(j), k, s.gate) for j in s_end]
        if s.cfg.weight_mode == "resample":
            wfn = lambda idx: s.gate[idx].astype(float)
        else:
            wfn = lambda idx: s.raw_weight[idx]
        src_fields = _fill(s.source, sw, k, wfn)
        fields = {key: np.concatenate([fields[key], src_fields[key]]) for key in fields}
        domain.append(np.full(n_src, SOURCE))
    return SequenceBatch(**fields, domain=np.concatenate(domain))


@dataclass(frozen=True)
class StitchSpec:
    """A window of ``junction`` steps from ``first`` followed by a target window from ``second``."""

    first: int                  # trajectory index in the first piece's dataset
    first_start: int
    second: int                 # target trajectory index
    second_start: int
    junction: int
    length: int
    first_domain: int = TARGET


def _window_starts(d: Dataset, k: int, allowed: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(trajectory, start) of every in-trajectory window of length k, optionally fully inside ``allowed``."""
    offsets = _flat_offsets(d)
    pairs = [(i, s) for i, traj in enumerate(d.trajectories) for s in range(len(traj) - k + 1)
             if allowed is None or allowed[offsets[i] + s:offsets[i] + s + k].all()]
    if not pairs:
        raise ConfigError(f"no admissible window of {k} steps")
    arr = np.array(pairs)
    return arr[:, 0], arr[:, 1]


def stitched_pool(tar: Dataset, n: int, k: int, seed: int, src: Dataset | None = None,
                  source_share: float = 0.5, src_allowed: np.ndarray | None = None) -> list[StitchSpec]:
    """Fixed validation pool of stitched sequences with nearest-state junctions.

    Each first piece (target, or source with probability ``source_share``) is followed
    by the target window whose first state is closest to the piece's last next state,
    taken from a different trajectory when the piece is itself from the target.
    Source pieces lie entirely inside ``src_allowed`` when given.
    """
    rng = np.random.default_rng(seed)
    t_traj, t_start = _window_starts(tar, k)
    offsets = _flat_offsets(tar)
    t_first_states = tar.flat["states"][offsets[t_traj] + t_start]
    pieces = {TARGET: (tar, t_traj, t_start)}
    if src is not None and source_share > 0:
        pieces[SOURCE] = (src, *_window_starts(src, k, src_allowed))
    specs = []
    for _ in range(n):
        dom = SOURCE if SOURCE in pieces and rng.random() < source_share else TARGET
        d, trajs, starts = pieces[dom]
        j = int(rng.integers(0, len(trajs)))
        a, a0 = int(trajs[j]), int(starts[j])
        end_state = d.trajectories[a].next_states[a0 + k - 1]
        dist = np.linalg.norm(t_first_states - end_state, axis=1)
        if dom == TARGET:
            dist = np.where(t_traj == a, np.inf, dist)
        if not np.isfinite(dist).any():
            raise ConfigError("stitched pool needs at least two target trajectories")
        best = int(np.argmin(dist))
        specs.append(StitchSpec(a, a0, int(t_traj[best]), int(t_start[best]), k, 2 * k, dom))
    return specs


def sampler_stitched_pool(s: FusionSampler, n: int, k: int, seed: int, source_share: float = 0.5):
    """Junction pool drawn from what the sampler trains on: target windows and gated source windows."""
    if s.has_source:
        return stitched_pool(s.target, n, k, seed, s.source, source_share, s.gate)
    return stitched_pool(s.target, n, k, seed)


def materialize_stitched(tar: Dataset, specs: list[StitchSpec], src: Dataset | None = None) -> SequenceBatch:
    """Build full-length stitched sequences; timesteps continue from the first piece."""
    length = specs[0].length
    parts = {TARGET: (tar, _flat_offsets(tar))}
    if src is not None:
        parts[SOURCE] = (src, _flat_offsets(src))
    per_domain = {}
    for dom, (d, off) in parts.items():
        rows = [r for r, sp in enumerate(specs) if sp.first_domain == dom]
        if rows:
            wins = [off[specs[r].first] + specs[r].first_start + np.arange(specs[r].junction) for r in rows]
            per_domain[dom] = (rows, _fill(d, wins, specs[0].junction, lambda idx: 1.0))
    if any(sp.first_domain == SOURCE for sp in specs) and SOURCE not in parts:
        raise ConfigError("stitched pool references source pieces but no source dataset was given")
    t_off = parts[TARGET][1]
    second = _fill(tar, [t_off[sp.second] + sp.second_start + np.arange(sp.length - sp.junction) for sp in specs],
                   length - specs[0].junction, lambda idx: 1.0)
    fields = {key: np.zeros((len(specs), length) + second[key].shape[2:], dtype=second[key].dtype) for key in second}
    j = specs[0].junction
    for key in fields:
        fields[key][:, j:] = second[key]
        for rows, first in per_domain.values():
            fields[key][rows, :j] = first[key]
    fields["timesteps"] = fields["timesteps"][:, :1] + np.arange(length)[None, :]
    junctions = np.zeros((len(specs), length), dtype=bool)
    junctions[:, j] = True
    domain = np.array([sp.first_domain for sp in specs])
    return SequenceBatch(**fields, domain=domain, junctions=junctions)
