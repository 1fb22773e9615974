import copy
import math

import numpy as np
import pytest
import torch

from stitchkit.config import FusionConfig
from stitchkit.fusion import SOURCE, TARGET, SequenceBatch, build_sampler
from stitchkit.policy import (Actor, BehaviorModel, CriticPair, DecisionTransformer, TorchSequences, critic_loss,
                              dt_loss, fit_behavior, gaussian_kl, kl_to_behavior, multistep_td_target,
                              policy_forward, policy_loss, policy_step, q_regularizer, run_episode, run_episodes,
                              train, window_td_targets)
from stitchkit.synth_envs import EnvSpec, make_env
from stitchkit.value_learning import MLP, TrainingError


def seq_batch(B=3, K=4, n=2, m=2, seed=0, domain=None, weights=None, pad=0):
    r = np.random.default_rng(seed)
    masks = np.ones((B, K))
    masks[:, :pad] = 0
    states = r.standard_normal((B, K, n)) * masks[..., None]
    actions = r.uniform(-0.9, 0.9, (B, K, m)) * masks[..., None]
    return SequenceBatch(states=states, actions=actions, rewards=r.standard_normal((B, K)) * masks,
                         adv=r.standard_normal((B, K)) * masks,
                         timesteps=(np.arange(K)[None].repeat(B, 0) * masks).astype(np.int64), masks=masks,
                         weights=masks if weights is None else weights * masks,
                         domain=np.full(B, TARGET) if domain is None else np.asarray(domain))


def small_policy(K=4, n=2, m=2, seed=0, dtype=torch.float64):
    return DecisionTransformer(n, m, K, embed=8, layers=2, heads=2, dropout=0.0, max_timestep=32, seed=seed,
                               dtype=dtype).eval()


class Fixed(torch.nn.Module):
    """Critic ``-||a - target||^2`` with no trainable parameters."""

    def __init__(self, target):
        super().__init__()
        self.register_buffer("target", torch.as_tensor(target, dtype=torch.float64))

    def forward(self, s, a):
        return -((a - self.target) ** 2).sum(-1)


def test_causality_by_perturbation():
    pol = small_policy()
    b = TorchSequences.of(seq_batch(K=5), torch.float64)
    base = policy_forward(pol, b)
    for t in range(4):
        for name in ("states", "actions", "adv"):
            pert = copy.copy(b)
            x = getattr(b, name).clone()
            x[:, t + 1] += 3.0
            setattr(pert, name, x)
            out = policy_forward(pol, pert)
            assert torch.equal(out[:, :t + 1], base[:, :t + 1])
    # the action at step t is not visible to the prediction at step t
    pert = copy.copy(b)
    x = b.actions.clone()
    x[:, 2] += 3.0
    pert.actions = x
    assert torch.equal(policy_forward(pol, pert)[:, 2], base[:, 2])


def test_padding_is_ignored():
    pol = small_policy()
    b = seq_batch(K=4, pad=2)
    out = policy_forward(pol, TorchSequences.of(b, torch.float64))
    b2 = SequenceBatch(states=np.where(b.masks[..., None] == 0, 7.0, b.states), actions=b.actions,
                       rewards=b.rewards, adv=b.adv, timesteps=b.timesteps, masks=b.masks, weights=b.weights,
                       domain=b.domain)
    out2 = policy_forward(pol, TorchSequences.of(b2, torch.float64))
    assert torch.allclose(out[:, 2:], out2[:, 2:], atol=1e-12)
    assert torch.all(out.abs() < 1)


def test_multistep_examples():
    assert multistep_td_target([1, 1], 0.99, 10, 0, 2) == pytest.approx(11.791)
    assert multistep_td_target([3, 5], 0.0, 10, 0, 2) == 3
    assert multistep_td_target([0, 0, 0], 0.9, 0.0, 0, 3) == 0
    for i, t in ((1, 1), (-1, 2), (0, 4)):
        with pytest.raises(IndexError):
            multistep_td_target([1, 2, 3], 0.9, 0.0, i, t)


def test_window_targets_match_direct_sum():
    r = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64)
    out = window_td_targets(r, torch.tensor([10.0], dtype=torch.float64), 0.9)
    for i in range(4):
        assert out[0, i].item() == pytest.approx(multistep_td_target(r[0].tolist(), 0.9, 10.0, i, 3)
                                                 if i < 3 else 10.0, abs=1e-12)


def test_critic_loss_single_step_gamma_zero():
    cfg = FusionConfig(gamma=0.0, context=2)
    b = TorchSequences.of(seq_batch(B=1, K=2), torch.float64)
    critics = CriticPair.create(2, 2, 8, seed=0, dtype=torch.float64)
    loss = critic_loss(b, critics, small_policy(K=2), cfg)
    s, a, r = b.states[:, 0], b.actions[:, 0], b.rewards[:, 0]
    want = sum(((r - q(s, a)) ** 2).sum() for q in critics.online())
    assert loss.item() == pytest.approx(want.item(), rel=1e-12)


def test_critic_loss_zero_gate_and_duplication():
    cfg = FusionConfig(context=3)
    critics = CriticPair.create(2, 2, 8, seed=0, dtype=torch.float64)
    pol = small_policy(K=3)
    src = TorchSequences.of(seq_batch(B=2, K=3, domain=[SOURCE, SOURCE], weights=np.zeros((2, 3))), torch.float64)
    assert critic_loss(src, critics, pol, cfg).item() == 0.0
    one = seq_batch(B=2, K=3, domain=[TARGET, SOURCE], weights=np.full((2, 3), 0.5))
    two = SequenceBatch(*(np.concatenate([x, x]) for x in (one.states, one.actions, one.rewards, one.adv,
                                                           one.timesteps, one.masks, one.weights, one.domain)))
    l1 = critic_loss(TorchSequences.of(one, torch.float64), critics, pol, cfg)
    l2 = critic_loss(TorchSequences.of(two, torch.float64), critics, pol, cfg)
    assert l1.item() == pytest.approx(l2.item(), rel=1e-12)


def test_critic_weight_placement():
    b = TorchSequences.of(seq_batch(B=1, K=3, domain=[SOURCE], weights=np.full((1, 3), 0.5)), torch.float64)
    critics = CriticPair.create(2, 2, 8, seed=0, dtype=torch.float64)
    pol = small_policy(K=3)
    inside = critic_loss(b, critics, pol, FusionConfig(context=3)).item()
    outside = critic_loss(b, critics, pol, FusionConfig(context=3, critic_weight_inside=False)).item()
    assert inside == pytest.approx(0.5 * outside, rel=1e-12)


def test_dt_loss_examples():
    cfg = FusionConfig(context=1)
    b = seq_batch(B=2, K=1, m=1)
    tb = TorchSequences.of(b, torch.float64)
    assert dt_loss(tb, tb.actions.clone(), cfg).item() == 0.0
    gated_out = TorchSequences.of(seq_batch(B=1, K=1, m=1, domain=[SOURCE], weights=np.zeros((1, 1))), torch.float64)
    assert dt_loss(gated_out, gated_out.actions + 1.0, cfg).item() == 0.0
    one = TorchSequences.of(seq_batch(B=1, K=1, m=1, domain=[SOURCE], weights=np.full((1, 1), math.exp(-1))),
                            torch.float64)
    assert dt_loss(one, one.actions + 1.0, cfg).item() == pytest.approx(math.exp(-1), rel=1e-12)


def test_twin_min_never_exceeds_either(rng):
    critics = CriticPair.create(3, 2, 16, seed=0, dtype=torch.float64)
    s, a = torch.as_tensor(rng.standard_normal((500, 3))), torch.as_tensor(rng.uniform(-1, 1, (500, 2)))
    m = critics.min_q(s, a)
    assert torch.all(m <= critics.q1(s, a)) and torch.all(m <= critics.q2(s, a))
    assert torch.all((m == critics.q1(s, a)) | (m == critics.q2(s, a)))


def test_soft_update_contraction():
    critics = CriticPair.create(2, 2, 8, seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in critics.q1_target.parameters():
            p.add_(1.0)
    diff = lambda: torch.cat([(p - t).reshape(-1) for p, t in zip(critics.q1.parameters(),
                                                                 critics.q1_target.parameters())]).norm().item()
    d0 = diff()
    for _ in range(25):
        critics.soft_update(0.1)
    assert diff() == pytest.approx(d0 * 0.9 ** 25, rel=1e-10)


def test_gaussian_kl():
    mu = torch.tensor([[0.3, -0.2]], dtype=torch.float64)
    s = torch.full_like(mu, 0.5)
    assert gaussian_kl(mu, s, mu, s).item() == 0.0
    got = gaussian_kl(torch.zeros(1, 1), torch.ones(1, 1), torch.ones(1, 1), 2 * torch.ones(1, 1)).item()
    assert got == pytest.approx(math.log(2) + (1 + 1) / 8 - 0.5)


def test_policy_equal_to_behavior_has_zero_kl():
    beh = BehaviorModel(2, 2, 8, dtype=torch.float64)
    with torch.no_grad():
        beh.log_std.fill_(math.log(math.sqrt(0.1)))
    b = TorchSequences.of(seq_batch(), torch.float64)
    pred, _ = beh(b.states)
    assert kl_to_behavior(b, pred, beh, FusionConfig()).item() == pytest.approx(0.0, abs=1e-12)


def test_policy_loss_without_regularizers_is_dt_loss():
    cfg = FusionConfig(alpha=0.0, eta_reg=0.0, context=4)
    b = TorchSequences.of(seq_batch(domain=[TARGET, SOURCE, SOURCE], weights=np.full((3, 4), 0.7)), torch.float64)
    pol = small_policy()
    out = policy_loss(b, pol, CriticPair.create(2, 2, 8, dtype=torch.float64), BehaviorModel(2, 2, dtype=torch.float64), cfg)
    assert out.total.item() == dt_loss(b, policy_forward(pol, b), cfg).item()
    assert out.q_reg == 0.0 and out.kl == 0.0


def test_q_regularizer_raises_value():
    b = seq_batch(B=16, K=2, seed=3)
    cfg = FusionConfig(context=2, eta_reg=0.0, lr=1e-2)
    critic = Fixed([0.8, -0.5])
    critics = CriticPair(critic, critic, critic, critic)
    tb = TorchSequences.of(b, torch.float64)
    means = {}
    for alpha in (0.0, 2.0):
        pol = small_policy(K=2, seed=1)
        opt = torch.optim.Adam(pol.parameters(), lr=1e-2)
        for _ in range(60):
            policy_step(tb, pol, critics, None, cfg.replace(alpha=alpha), opt)
        with torch.no_grad():
            means[alpha] = q_regularizer(tb, policy_forward(pol, tb), critics, cfg).item()
    assert means[2.0] > means[0.0]


def test_policy_step_freezes_critics_and_flags_nan():
    b = TorchSequences.of(seq_batch(), torch.float64)
    critics = CriticPair.create(2, 2, 8, dtype=torch.float64)
    before = [p.clone() for p in critics.parameters()]
    pol = small_policy()
    policy_step(b, pol, critics, None, FusionConfig(context=4), torch.optim.Adam(pol.parameters()))
    assert all(torch.equal(a, c) for a, c in zip(before, critics.parameters()))
    assert all(p.grad is None for p in critics.parameters())
    assert all(p.requires_grad for p in critics.parameters())
    b.actions[0, 0, 0] = float("nan")
    with pytest.raises(TrainingError):
        policy_step(b, pol, critics, None, FusionConfig(context=4), torch.optim.Adam(pol.parameters()))


def test_train_is_deterministic(chain_pair, toy_cfg):
    tar, _ = chain_pair
    s = build_sampler(tar.with_flat_column("A", np.zeros(tar.n_transitions)), None, toy_cfg)
    a = train(s, toy_cfg, max_timestep=16)
    b = train(s, toy_cfg, max_timestep=16)
    assert a.history == b.history and len(a.history) == toy_cfg.train_steps


def test_fit_behavior_learns_mean(point_pair):
    tar, _ = point_pair
    cfg = FusionConfig(hidden=16)
    beh = fit_behavior(tar, cfg, steps=300)
    with torch.no_grad():
        mu, _ = beh(torch.tensor(tar.flat["states"], dtype=torch.float32))
    err = np.mean((mu.numpy() - tar.flat["actions"]) ** 2)
    assert err < np.mean(tar.flat["actions"] ** 2)


class Recorder(torch.nn.Module):
    """Wraps a policy and keeps every input it sees."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = []
        self.state_dim, self.action_dim, self.context = inner.state_dim, inner.action_dim, inner.context

    def forward(self, *args):
        self.calls.append([a.clone() for a in args])
        return self.inner(*args)


def test_actor_buffers():
    rec = Recorder(small_policy(K=3, dtype=torch.float32))
    actor = Actor(rec, MLP(2, 1, 4), n_envs=2)
    a0 = actor.act(np.ones((2, 2)))
    S, A, C, T, M = rec.calls[0]
    assert torch.all(A == 0) and M[:, :2].sum() == 0 and torch.all(M[:, 2] == 1) and torch.all(T[:, 2] == 0)
    actor.act(np.full((2, 2), 2.0))
    S, A, C, T, M = rec.calls[1]
    assert torch.allclose(A[:, 1], torch.as_tensor(a0, dtype=torch.float32)) and torch.all(A[:, 2] == 0)
    assert T[0].tolist() == [0, 0, 1] and M[0].tolist() == [0, 1, 1]
    with pytest.raises(ValueError):
        actor.act(np.ones((3, 2)))


def test_actor_context_one_and_determinism():
    pol = small_policy(K=1, dtype=torch.float32)
    actor = Actor(pol, MLP(2, 1, 4), n_envs=1)
    stream = np.random.default_rng(0).standard_normal((6, 1, 2))
    first = [actor.act(s) for s in stream]
    actor.reset()
    second = [actor.act(s) for s in stream]
    assert all(np.array_equal(x, y) for x, y in zip(first, second))


def test_unstandardized_command_branch():
    c = MLP(2, 1, 4)
    pol = small_policy(K=2, dtype=torch.float32)
    raw = Actor(pol, c, standardized=True).command(np.ones((1, 2)))
    std = Actor(pol, c, standardized=False, stats=(0.5, 2.0), eps=0.0).command(np.ones((1, 2)))
    assert np.allclose(std, (raw - 0.5) / 2.0)


def test_run_episode_examples():
    pol, c = small_policy(K=3, dtype=torch.float32), MLP(2, 1, 4)
    spec = EnvSpec(horizon=1)
    traj, _ = run_episode(make_env(spec), pol, c)
    assert len(traj) == 1
    zero = EnvSpec(horizon=6, reward_scale=0.0)
    assert run_episode(make_env(zero), pol, c)[1] == 0.0
    spec = EnvSpec(horizon=10, noise_std=0.05, seed=2)
    r1 = run_episode(make_env(spec), pol, c)[1]
    r2 = run_episode(make_env(spec), pol, c)[1]
    assert r1 == r2
    trajs, returns = run_episodes([make_env(spec, seed=i) for i in range(3)], Actor(pol, c))
    assert [len(t) for t in trajs] == [10, 10, 10] and returns.shape == (3,)


def test_env_faults_report_the_step():
    class Broken:
        def reset(self):
            return np.zeros(2)

        def step(self, a):
            raise ValueError("boom")

    with pytest.raises(RuntimeError, match="step 0"):
        run_episode(Broken(), small_policy(K=2, dtype=torch.float32), MLP(2, 1, 4))
