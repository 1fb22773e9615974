"""State-structure filtering: RBF-kernel MMD between latent fragments and the top-xi% gate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .config import ConfigError, FusionConfig
from .datamodel import Dataset, Fragment, extract_fragments, fragment_assignment, fragment_starts
from .latent import Encoder, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float | str = "median"

    def resolve(self, *clouds: np.ndarray) -> "KernelConfig":
        if self.bandwidth != "median":
            sigma = float(self.bandwidth)
            if sigma <= 0:
                raise ConfigError("bandwidth must be positive")
            return KernelConfig(sigma)
        return KernelConfig(median_bandwidth(np.concatenate([np.atleast_2d(c) for c in clouds])))

    @property
    def sigma(self) -> float:
        if self.bandwidth == "median":
            raise ConfigError("bandwidth not resolved; call resolve() first")
        return float(self.bandwidth)


@dataclass(frozen=True)
class GateResult:
    d_m: np.ndarray
    threshold: float
    kept: np.ndarray

    @property
    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)


def median_bandwidth(z: np.ndarray, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance of the pooled points (subsampled above ``max_points``)."""
    z = np.asarray(z, dtype=float)
    if len(z) > max_points:
        z = z[np.random.default_rng(seed).choice(len(z), max_points, replace=False)]
    dists = pdist(z)
    dists = dists[dists > 0]
    return float(np.median(dists)) if dists.size else 1.0


def rbf(x: np.ndarray, y: np.ndarray, sigma: float) -> np.ndarray:
    sq = (x * x).sum(-1)[..., :, None] + (y * y).sum(-1)[..., None, :] - 2.0 * x @ np.swapaxes(y, -1, -2)
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma * sigma))


def mmd2(zs, zt, k: KernelConfig) -> float:
    """Biased (V-statistic) squared MMD; diagonal kernel terms are included."""
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    zt = np.atleast_2d(np.asarray(zt, dtype=float))
    if zs.size == 0 or zt.size == 0:
        raise ValueError("mmd2 needs two nonempty batches")
    sigma = k.sigma
    value = rbf(zs, zs, sigma).mean() + rbf(zt, zt, sigma).mean() - 2.0 * rbf(zs, zt, sigma).mean()
    return max(float(value), 0.0)


def _sample_targets(n_pool: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if m >= n_pool:
        return np.arange(n_pool)
    return np.sort(rng.choice(n_pool, size=m, replace=False))


def fragment_distance(zs: np.ndarray, target_z, k: KernelConfig, m: int, seed: int = 0) -> float:
    """Mean MMD between one latent fragment and ``m`` target fragments drawn without replacement.

    ``target_z`` is a sequence of latent fragments (each ``(length, latent_dim)``).
    """
    target_z = [np.atleast_2d(t) for t in target_z]
    if not target_z:
        raise ValueError("no target fragments")
    zs = np.atleast_2d(zs)
    if any(t.shape[0] != zs.shape[0] for t in target_z):
        raise ValueError("all fragments must share the same length")
    idx = _sample_targets(len(target_z), m, np.random.default_rng(seed))
    return float(np.mean([math.sqrt(mmd2(zs, target_z[j], k)) for j in idx]))


def gate(d_m, xi_percent: float) -> GateResult:
    d = np.asarray(d_m, dtype=float)
    if d.size == 0:
        raise ValueError("gate needs at least one fragment distance")
    if not 0 < xi_percent <= 100:
        raise ConfigError(f"xi_percent must lie in (0, 100], got {xi_percent}")
    count = math.ceil(xi_percent / 100.0 * d.size - 1e-9)
    order = np.argsort(d, kind="stable")            # ascending, ties by index
    kept = np.zeros(d.size, dtype=bool)
    kept[order[:count]] = True
    return GateResult(d, float(d[order[count - 1]]), kept)


# -- dataset scoring ---------------------------------------------------------

@dataclass(frozen=True)
class FragmentLayout:
    """Source fragments (with tail coverage) and the owning fragment of every transition."""

    fragments: list[Fragment]
    owner: np.ndarray               # flat transition index -> fragment index, -1 if uncovered


def fragment_layout(d: Dataset, length: int, stride: int) -> FragmentLayout:
    frags: list[Fragment] = []
    owners = []
    for i, traj in enumerate(d.trajectories):
        starts = fragment_starts(len(traj), length, stride, cover_tail=True)
        own = fragment_assignment(len(traj), starts, length)
        owners.append(np.where(own >= 0, own + len(frags), -1))
        frags.extend(Fragment(i, s, length) for s in starts)
    return FragmentLayout(frags, np.concatenate(owners))


def _batch_distances(zs: np.ndarray, zt: np.ndarray, self_t: np.ndarray, picks: np.ndarray,
                     sigma: float) -> np.ndarray:
    """Vectorised mean-MMD for source fragments ``zs`` (F, l, d) against per-row target picks."""
    self_s = rbf(zs, zs, sigma).mean(axis=(1, 2))                     # (F,)
    cross = rbf(zs[:, None], zt[picks], sigma).mean(axis=(2, 3))      # (F, M)
    sq = self_s[:, None] + self_t[picks] - 2.0 * cross
    return np.sqrt(np.maximum(sq, 0.0)).mean(axis=1)


def score_fragments(src: Dataset, tar: Dataset, encoder: Encoder, cfg: FusionConfig,
                    chunk: int = 256) -> tuple[Dataset, FragmentLayout, GateResult, KernelConfig]:
    """Attach per-transition ``d_m`` to ``src`` (each step inherits its fragment's distance)."""
    length, stride = cfg.frag_length, cfg.frag_stride
    layout = fragment_layout(src, length, stride)
    if not layout.fragments:
        raise ValueError(f"no source fragments of length {length}")
    tar_frags = extract_fragments(tar, length, stride)
    enc_tar = [encode(encoder, f.states(tar)) for f in tar_frags]
    enc_src = np.stack([encode(encoder, f.states(src)) for f in layout.fragments])
    zt = np.stack(enc_tar)
    kernel = KernelConfig(cfg.bandwidth).resolve(zt.reshape(-1, zt.shape[-1]),
                                                 enc_src.reshape(-1, enc_src.shape[-1]))
    sigma = kernel.sigma
    self_t = rbf(zt, zt, sigma).mean(axis=(1, 2))
    rng = np.random.default_rng(cfg.seed)
    picks = np.stack([_sample_targets(len(zt), cfg.mmd_samples, rng) for _ in layout.fragments])
    d_frag = np.concatenate([
        _batch_distances(enc_src[i:i + chunk], zt, self_t, picks[i:i + chunk], sigma)
        for i in range(0, len(enc_src), chunk)])
    per_step = np.where(layout.owner >= 0, d_frag[np.maximum(layout.owner, 0)], np.inf)
    if np.any(layout.owner < 0):
        log.warning("%d source transitions lie in trajectories shorter than %d; they are never gated in",
                    int(np.sum(layout.owner < 0)), length)
    result = gate(d_frag, cfg.xi_percent)
    log.info("mmd gate: kept %d/%d fragments, threshold %.4g, sigma %.4g",
             int(result.kept.sum()), len(d_frag), result.threshold, sigma)
    return src.with_flat_column("d_m", per_step), layout, result, kernel


def gate_from_column(src: Dataset, cfg: FusionConfig) -> tuple[FragmentLayout, GateResult, np.ndarray]:
    """Recover the fragment gate and per-transition indicator from a stored ``d_m`` column.

    Every fragment's start step owns that fragment, so the column holds each fragment's
    distance at its start.
    """
    layout = fragment_layout(src, cfg.frag_length, cfg.frag_stride)
    d_col = src.flat["d_m"]
    starts = np.cumsum([0] + [len(t) for t in src.trajectories])
    d_frag = np.array([d_col[starts[f.parent] + f.start] for f in layout.fragments])
    result = gate(d_frag, cfg.xi_percent)
    indicator = np.where(layout.owner >= 0, result.kept[np.maximum(layout.owner, 0)], False)
    return layout, result, indicator
