"""End-to-end stages (data, MMD gate, OT weights, relabeling, training, evaluation, diagnostics).

Each stage is a plain function over in-memory values; :class:`Runner` wraps them with
file artifacts, a JSON manifest, and resume-from-first-missing-output.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import config as config_mod
from .config import ConfigError, FusionConfig, config_hash
from .datamodel import Dataset, load_dataset, save_dataset
from .diagnostics import junction_report, moving_average, normalized_score
from .fusion import FusionSampler, build_sampler, materialize_stitched, sampler_stitched_pool, stitched_pool
from .latent import Encoder, fit_encoder
from .mmd_filter import score_fragments
from .ot_credibility import score_transitions
from .policy import Actor, CriticPair, TrainResult, fit_behavior, make_policy, run_episodes, train
from .tensorio import load_tensors
from .synth_envs import EnvSpec, collect_dataset, make_env, reference_returns
from .value_learning import (MLP, AdvantageTokens, advantage_stats, fit_command, fit_Q_adv, fit_V,
                             load_module, raw_advantages, relabel_advantages, save_module)

log = logging.getLogger(__name__)

STAGES = ("gen-data", "score-mmd", "score-ot", "relabel", "train", "eval", "diagnose")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    family: str = "point_mass_2d"
    shift_kind: str = "dynamics_scale"
    source_shift: float = 0.0
    target_shift: float = 3.0
    horizon: int = 50
    noise_std: float = 0.01
    target_quality: str = "medium+expert"
    source_quality: str = "expert"
    n_target: int = 400
    n_source: int = 4000
    target_path: str = ""
    source_path: str = ""
    eval_episodes: int = 20
    ref_episodes: int = 100
    stitch_pool: int = 128
    n_states: int = 8

    def env_specs(self, seed: int) -> tuple[EnvSpec, EnvSpec]:
        base = EnvSpec(family=self.family, shift_kind=self.shift_kind, horizon=self.horizon,
                       noise_std=self.noise_std, seed=seed, n_states=self.n_states)
        return base.with_shift(self.target_shift), base.with_shift(self.source_shift)

    def env_key(self) -> dict:
        keep = ("family", "shift_kind", "source_shift", "target_shift", "horizon", "noise_std", "n_states")
        return {k: getattr(self, k) for k in keep}


def load_config(path: str | Path | None) -> tuple[FusionConfig, PipelineConfig]:
    values = config_mod.parse_flat(Path(path).read_text(), str(path)) if path else {}
    names = {f.name for f in fields(FusionConfig)} | {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return (config_mod.build(FusionConfig, values, strict=False),
            config_mod.build(PipelineConfig, values, strict=False))


# -- stage functions ---------------------------------------------------------

def collect_mixed(spec: EnvSpec, quality: str, n: int, domain: str, seed: int) -> Dataset:
    """``quality`` may join tiers with ``+`` (e.g. ``medium+expert``); each tier gets an equal share."""
    tiers = quality.split("+")
    parts = []
    for i, tier in enumerate(tiers):
        share = n // len(tiers) + (1 if i < n % len(tiers) else 0)
        parts.append(collect_dataset(spec, tier, share, domain, seed=seed + 100 * i))
    if len(parts) == 1:
        return parts[0]
    return Dataset.from_trajectories([t for p in parts for t in p.trajectories], meta={**parts[0].meta, "quality": quality})


def generate_data(pcfg: PipelineConfig, seed: int) -> tuple[Dataset, Dataset]:
    tar_spec, src_spec = pcfg.env_specs(seed)
    tar = collect_mixed(tar_spec, pcfg.target_quality, pcfg.n_target, "target", seed)
    src = collect_mixed(src_spec, pcfg.source_quality, pcfg.n_source, "source", seed + 10_000)
    return tar, src


def score_mmd(tar: Dataset, src: Dataset, cfg: FusionConfig) -> tuple[Dataset, Encoder]:
    encoder = fit_encoder(src, tar, cfg)
    scored, _, _, _ = score_fragments(src, tar, encoder, cfg)
    return scored, encoder


def score_ot(tar: Dataset, src: Dataset, cfg: FusionConfig) -> Dataset:
    scored, _ = score_transitions(src, tar, cfg)
    return scored


@dataclass
class Relabeled:
    target: Dataset
    source: Dataset | None
    sampler: FusionSampler
    v: nn.Module
    q: nn.Module
    command: nn.Module
    tokens: AdvantageTokens


def relabel(tar: Dataset, src: Dataset | None, cfg: FusionConfig) -> Relabeled:
    """Fit the relabeling value pair, attach advantage tokens, then fit the command network."""
    cfg = cfg.for_variant()
    n, m = tar.state_dim, tar.action_dim
    sampler = build_sampler(tar, src, cfg)
    v = MLP(n, 1, cfg.hidden, seed=cfg.seed + 1)
    q = MLP(n + m, 1, cfg.hidden, seed=cfg.seed + 2)
    fit_V(sampler, v, cfg)
    fit_Q_adv(sampler, v, q, cfg)
    # standardization statistics over the fused pool (target plus gated source)
    pool = [raw_advantages(tar, q, v)]
    if sampler.has_source:
        pool.append(raw_advantages(src, q, v)[sampler.pool])
    stats = advantage_stats(np.concatenate(pool))
    tar_r, tokens = relabel_advantages(tar, q, v, cfg.standardize_adv, cfg.adv_eps, stats)
    src_r = relabel_advantages(src, q, v, cfg.standardize_adv, cfg.adv_eps, stats)[0] if src is not None else None
    sampler = build_sampler(tar_r, src_r, cfg)
    c = MLP(n, 1, cfg.hidden, seed=cfg.seed + 3)
    fit_command(sampler, c, cfg)
    return Relabeled(tar_r, src_r, sampler, v, q, c, tokens)


def train_policy(rel: Relabeled, cfg: FusionConfig, horizon: int, on_checkpoint=None) -> TrainResult:
    cfg = cfg.for_variant()
    behavior = fit_behavior(rel.target, cfg) if cfg.eta_reg > 0 else None
    return train(rel.sampler, cfg, behavior, max_timestep=horizon + 1, on_checkpoint=on_checkpoint)


def make_actor(policy, command, tokens: AdvantageTokens, n_envs: int) -> Actor:
    return Actor(policy, command, tokens.standardized, (tokens.mu, tokens.sigma), tokens.eps, n_envs)


def evaluate(policy, command, tokens: AdvantageTokens, spec: EnvSpec, episodes: int, seed: int) -> np.ndarray:
    envs = [make_env(spec, seed=seed * 1000 + 7 + i) for i in range(episodes)]
    _, returns = run_episodes(envs, make_actor(policy, command, tokens, episodes))
    return returns


def stitched_batch(sampler: FusionSampler, n: int, seed: int, shared_source: Dataset | None = None):
    """Validation junctions: target-target joins plus source-target switches.

    By default the source pieces come from the sampler's own gated pool (the windows
    this run trains on); ``shared_source`` instead draws them from a fixed source set
    so that several runs can be scored on identical sequences.
    """
    k = sampler.cfg.context
    if shared_source is not None:
        return materialize_stitched(sampler.target, stitched_pool(sampler.target, n, k, seed, shared_source),
                                    shared_source)
    return materialize_stitched(sampler.target, sampler_stitched_pool(sampler, n, k, seed), sampler.source)


# -- file artifacts ----------------------------------------------------------

def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def critics_module(critics: CriticPair) -> nn.ModuleDict:
    return nn.ModuleDict({"q1": critics.q1, "q2": critics.q2, "q1_target": critics.q1_target,
                          "q2_target": critics.q2_target})


class Runner:
    """File-backed pipeline for one (config, seed, variant) run under ``out_dir``."""

    def __init__(self, fcfg: FusionConfig, pcfg: PipelineConfig, out_dir: str | Path, seed: int | None = None,
                 variant: str | None = None):
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if variant is not None:
            changes["variant"] = variant
        self.fcfg = fcfg.replace(**changes) if changes else fcfg
        self.pcfg = pcfg
        self.seed = self.fcfg.seed
        self.out = Path(out_dir)
        self.hash = config_hash(self.fcfg, self.pcfg)
        self.manifest_path = self.out / "manifest.json"
        self._cache: dict = {}

    # -- paths
    def path(self, name: str) -> Path:
        return self.out / name

    OUTPUTS = {
        "gen-data": ["target.traj", "source.traj"],
        "score-mmd": ["source_mmd.traj", "encoder.tensors"],
        "score-ot": ["source_scored.traj"],
        "relabel": ["target_relabeled.traj", "source_relabeled.traj", "value_v.tensors", "value_q.tensors",
                    "command.tensors"],
        "train": ["policy.tensors", "critics.tensors", "train_metrics.csv"],
        "eval": ["eval_returns.csv", "eval_summary.csv"],
        "diagnose": ["diag_J_a.csv", "diag_J_Q.csv", "diag_td_residual.csv", "diag_summary.csv"],
    }

    def outputs(self, stage: str) -> list[Path]:
        return [self.path(n) for n in self.OUTPUTS[stage]]

    # -- manifest
    def load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def _fresh_manifest(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "variant": self.fcfg.variant,
                "env": self.pcfg.env_key(), "config": config_mod.to_flat(self.fcfg, self.pcfg),
                "stages": {}, "summary": {}}

    def save_manifest(self, manifest: dict) -> None:
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def stage_done(self, manifest: dict, stage: str) -> bool:
        entry = manifest.get("stages", {}).get(stage)
        return (entry is not None and entry.get("config_hash") == self.hash
                and all(p.exists() for p in self.outputs(stage)))

    # -- execution
    def run(self, stages=STAGES, force: bool = False) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = self.load_manifest()
        if manifest.get("config_hash") != self.hash:
            if manifest:
                log.info("config hash changed (%s -> %s); rerunning all stages", manifest.get("config_hash"), self.hash)
            manifest = self._fresh_manifest()
        rerun = force
        for stage in stages:
            if not rerun and self.stage_done(manifest, stage):
                log.info("stage %s: up to date", stage)
                continue
            rerun = True
            started = time.time()
            log.info("stage %s: running", stage)
            try:
                summary = getattr(self, "stage_" + stage.replace("-", "_"))()
            except Exception as exc:
                self.save_manifest(manifest)
                raise StageError(stage, exc) from exc
            manifest["stages"][stage] = {
                "outputs": [p.name for p in self.outputs(stage)], "config_hash": self.hash, "seed": self.seed,
                "started": started, "seconds": round(time.time() - started, 3)}
            if summary:
                manifest["summary"].update(summary)
            self.save_manifest(manifest)
        return manifest

    def run_stage(self, stage: str) -> dict:
        """Run one stage unconditionally (its inputs must already exist)."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return self.run([stage], force=True)

    def _meta(self, **extra) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, **extra}

    def _load(self, name: str) -> Dataset:
        if name not in self._cache:
            self._cache[name] = load_dataset(self.path(name))
        return self._cache[name]

    def stage_gen_data(self):
        p = self.pcfg
        if p.target_path or p.source_path:
            for given in (p.target_path, p.source_path):
                if not given or not Path(given).exists():
                    raise FileNotFoundError(f"dataset path not found: {given or '<unset>'}")
            tar, src = load_dataset(p.target_path), load_dataset(p.source_path)
        else:
            tar, src = generate_data(p, self.seed)
        save_dataset(tar, self.path("target.traj"), self._meta())
        save_dataset(src, self.path("source.traj"), self._meta())

    def stage_score_mmd(self):
        scored, encoder = score_mmd(self._load("target.traj"), self._load("source.traj"), self.fcfg)
        save_dataset(scored, self.path("source_mmd.traj"), self._meta())
        encoder.save(self.path("encoder.tensors"))

    def stage_score_ot(self):
        scored = score_ot(self._load("target.traj"), self._load("source_mmd.traj"), self.fcfg)
        save_dataset(scored, self.path("source_scored.traj"), self._meta())

    def stage_relabel(self):
        rel = relabel(self._load("target.traj"), self._load("source_scored.traj"), self.fcfg)
        save_dataset(rel.target, self.path("target_relabeled.traj"), self._meta())
        save_dataset(rel.source, self.path("source_relabeled.traj"), self._meta())
        t = rel.tokens
        save_module(rel.v, self.path("value_v.tensors"), **self._meta())
        save_module(rel.q, self.path("value_q.tensors"), **self._meta())
        save_module(rel.command, self.path("command.tensors"),
                    **self._meta(adv_mu=repr(t.mu), adv_sigma=repr(t.sigma), adv_eps=repr(t.eps),
                                 standardized=t.standardized))
        return {"adv_mu": t.mu, "adv_sigma": t.sigma}

    def _relabeled(self) -> Relabeled:
        tar, src = self._load("target_relabeled.traj"), self._load("source_relabeled.traj")
        cfg = self.fcfg.for_variant()
        n, m = tar.state_dim, tar.action_dim
        v = load_module(MLP(n, 1, cfg.hidden), self.path("value_v.tensors"))
        q = load_module(MLP(n + m, 1, cfg.hidden), self.path("value_q.tensors"))
        c = load_module(MLP(n, 1, cfg.hidden), self.path("command.tensors"))
        _, meta = load_tensors(self.path("command.tensors"))
        tokens = AdvantageTokens(np.zeros(0), np.zeros(0), float(meta["adv_mu"]), float(meta["adv_sigma"]),
                                 float(meta["adv_eps"]), meta["standardized"] == "True")
        return Relabeled(tar, src, build_sampler(tar, src, cfg), v, q, c, tokens)

    def _checkpoint_paths(self, step: int) -> tuple[Path, Path]:
        return self.path(f"checkpoints/policy_{step}.tensors"), self.path(f"checkpoints/critics_{step}.tensors")

    def stage_train(self):
        rel = self._relabeled()
        self.path("checkpoints").mkdir(exist_ok=True)
        steps: list[int] = []

        def on_checkpoint(step, result):
            pp, cp = self._checkpoint_paths(step)
            save_module(result.policy, pp, **self._meta(step=step))
            save_module(critics_module(result.critics), cp, **self._meta(step=step))
            steps.append(step)

        result = train_policy(rel, self.fcfg, self.pcfg.horizon, on_checkpoint)
        save_module(result.policy, self.path("policy.tensors"), **self._meta())
        save_module(critics_module(result.critics), self.path("critics.tensors"), **self._meta())
        keys = ["step", "critic", "dt", "q_reg", "kl", "policy"]
        write_csv(self.path("train_metrics.csv"), keys, ([h[k] for k in keys] for h in result.history))
        (self.path("checkpoints") / "index.csv").write_text("step\n" + "".join(f"{s}\n" for s in steps))
        return {"final_policy_loss": result.history[-1]["policy"] if result.history else None}

    def _policy(self, path: Path):
        tar = self._load("target_relabeled.traj")
        policy = make_policy(tar.state_dim, tar.action_dim, self.fcfg, self.pcfg.horizon + 1)
        return load_module(policy, path).eval()

    def _critics(self, path: Path) -> CriticPair:
        tar = self._load("target_relabeled.traj")
        pair = CriticPair.create(tar.state_dim, tar.action_dim, self.fcfg.hidden)
        load_module(critics_module(pair), path)
        return pair

    def stage_eval(self):
        rel = self._relabeled()
        policy = self._policy(self.path("policy.tensors"))
        tar_spec, _ = self.pcfg.env_specs(self.seed)
        returns = evaluate(policy, rel.command, rel.tokens, tar_spec, self.pcfg.eval_episodes, self.seed)
        j_rand, j_exp = reference_returns(tar_spec, self.pcfg.ref_episodes, seed=self.seed)
        J = float(np.mean(returns))
        score = normalized_score(J, j_rand, j_exp)
        write_csv(self.path("eval_returns.csv"), ["episode", "return"], enumerate(returns.tolist()))
        write_csv(self.path("eval_summary.csv"), ["metric", "value"],
                  [("return", J), ("J_rand", j_rand), ("J_exp", j_exp), ("normalized_score", score)])
        return {"return": J, "normalized_score": score}

    def stage_diagnose(self):
        rel = self._relabeled()
        batch = stitched_batch(rel.sampler, self.pcfg.stitch_pool, self.seed + 555)
        idx = self.path("checkpoints") / "index.csv"
        steps = [int(r["step"]) for r in read_csv(idx)] if idx.exists() else []
        points = [(s, *self._checkpoint_paths(s)) for s in steps]
        if not points:
            points = [(self.fcfg.train_steps, self.path("policy.tensors"), self.path("critics.tensors"))]
        dtype = next(rel.v.parameters()).dtype

        def v_fn(states):
            with torch.no_grad():
                return rel.v(torch.as_tensor(states, dtype=dtype)).double().numpy()

        series = {"J_a": [], "J_Q": [], "td_residual": []}
        for step, pp, cp in points:
            J_a, J_Q, td = junction_report(self._policy(pp), self._critics(cp), v_fn, batch,
                                           self.fcfg.context, self.fcfg.gamma)
            for key, val in zip(series, (J_a, J_Q, td)):
                series[key].append((step, val))
        for key, rows in series.items():
            vals = [v for _, v in rows]
            smooth = moving_average(vals, 5)
            write_csv(self.path(f"diag_{key}.csv"), ["step", "value", "moving_mean"],
                      [(s, v, a) for (s, v), a in zip(rows, smooth)])
        final = {key: rows[-1][1] for key, rows in series.items()}
        write_csv(self.path("diag_summary.csv"), ["metric", "value"], list(final.items()))
        return final


def run_pipeline(config_path: str | Path | None, out_dir: str | Path, seed: int | None = None,
                 variant: str | None = None, stages=STAGES) -> dict:
    fcfg, pcfg = load_config(config_path)
    return Runner(fcfg, pcfg, out_dir, seed, variant).run(stages)


def compare_runs(manifests: list[str | Path], out_csv: str | Path | None = None) -> str:
    """Side-by-side table of per-run summaries; every run must share the env spec."""
    loaded = []
    for m in manifests:
        path = Path(m)
        if path.is_dir():
            path = path / "manifest.json"
        loaded.append(json.loads(path.read_text()))
    if not loaded:
        raise ComparisonError("no manifests given")
    env = loaded[0]["env"]
    for man in loaded[1:]:
        if man["env"] != env:
            raise ComparisonError(f"env specs differ: {env} vs {man['env']}")
    labels = [f"{m['variant']}/seed{m['seed']}" for m in loaded]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{i}" for i, lab in enumerate(labels)]
    metrics = ["normalized_score", "return", "J_a", "J_Q", "td_residual"]
    rows = [[metric] + [man["summary"].get(metric, "") for man in loaded] for metric in metrics]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *labels])
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    text = buf.getvalue()
    if out_csv is not None:
        Path(out_csv).write_text(text)
    return text


# -- fusion deviation bound on small chain pools ----------------------------

def lemma_pools(seed: int, max_atoms: int = 64) -> dict:
    """One randomized chain_discrete source/target pool pair with real OT credibility weights."""
    rng = np.random.default_rng(seed)
    n_states = int(rng.integers(4, 9))
    base = EnvSpec(family="chain_discrete", horizon=int(rng.integers(4, 9)), noise_std=float(rng.uniform(0, 0.3)),
                   seed=seed, n_states=n_states)
    kind = str(rng.choice(["dynamics_scale", "action_clip", "state_affine"]))
    src_spec = EnvSpec(**{**base.__dict__, "shift_kind": kind, "shift_magnitude": float(rng.uniform(0, 2))})
    n_tar, n_src = (int(x) for x in rng.integers(8, max_atoms + 1, size=2))
    tar = collect_dataset(base, str(rng.choice(["random", "medium"])), n_tar, "target", seed=seed)
    src = collect_dataset(src_spec, str(rng.choice(["random", "medium", "expert"])), n_src, "source", seed=seed + 1)
    eta_w = float(rng.choice([0.5, 1.0, 2.0]))
    cfg = FusionConfig(eta_w=eta_w, ot_method="exact", ot_exact_max_entries=max_atoms ** 2)
    _, scores = score_transitions(src, tar, cfg)
    from .mmd_filter import gate
    kept = gate(rng.random(n_src), float(rng.choice([25.0, 50.0, 100.0]))).kept
    from .fusion import triples
    return {"src": triples(src), "tar": triples(tar), "gate": kept, "weights": scores.weights,
            "beta": float(rng.uniform(0, 1))}


def lemma_check_runs(n_pairs: int = 50, trials: int = 100, seed: int = 0):
    from .diagnostics import lemma1_check
    reports = []
    for i in range(n_pairs):
        p = lemma_pools(seed * 100_003 + i)
        reports.append(lemma1_check(p["src"], p["tar"], p["gate"], p["weights"], p["beta"], trials, seed=seed + i))
    return reports
