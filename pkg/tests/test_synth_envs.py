import numpy as np
import pytest

from stitchkit.config import ConfigError
from stitchkit.datamodel import DatasetError
from stitchkit.diagnostics import UndefinedScoreError, normalized_score
from stitchkit.synth_envs import (Controller, EnvSpec, collect_dataset, make_env, mean_return, reaches_goal,
                                  reference_returns, rollout)


def test_zero_shift_is_bit_identical():
    for family in ("point_mass_2d", "chain_discrete"):
        for kind in ("dynamics_scale", "action_clip", "state_affine"):
            base = EnvSpec(family=family, noise_std=0.1, seed=4)
            shifted = EnvSpec(family=family, shift_kind=kind, shift_magnitude=0.0, noise_std=0.1, seed=4)
            a = collect_dataset(base, "random", 60, seed=2)
            b = collect_dataset(shifted, "random", 60, seed=2)
            assert all(np.array_equal(x.next_states, y.next_states) for x, y in zip(a.trajectories, b.trajectories))


def test_action_clip_bounds_realized_actions():
    spec = EnvSpec(shift_kind="action_clip", shift_magnitude=0.3)
    d = collect_dataset(spec, "random", 200, seed=0)
    assert np.abs(d.flat["actions"]).max() <= 0.3


def test_dynamics_scale_one_step_closed_form():
    spec = EnvSpec(shift_magnitude=2.0, start_noise=0.0)
    env = make_env(spec)
    s, a = np.array([-0.1, 0.05]), np.array([0.4, -0.3])
    bump = np.exp(-(0.1 ** 2 + 0.05 ** 2) / (2 * 0.35 ** 2))
    want = s + 0.1 * a + 0.04 * 3.0 * bump * np.array([-1.0, 0.0])
    assert np.allclose(env.mean_next(s, a), want, atol=1e-15)
    base = make_env(spec.with_shift(0.0))
    assert np.allclose(env.drift(s), 3.0 * base.drift(s))


def test_state_affine_keeps_goal_fixed():
    env = make_env(EnvSpec(shift_kind="state_affine", shift_magnitude=1.5, wind=0.0))
    assert np.allclose(env.mean_next(env.goal, np.zeros(2)), env.goal)


def test_shift_continuity():
    s, a = np.array([-0.2, 0.1]), np.array([0.5, 0.5])
    for kind in ("dynamics_scale", "state_affine"):
        outs = [make_env(EnvSpec(shift_kind=kind, shift_magnitude=m)).mean_next(s, a) for m in np.linspace(0, 3, 31)]
        steps = np.linalg.norm(np.diff(outs, axis=0), axis=1)
        assert steps.max() < 0.1 * 0.1 + 1e-12


def test_chain_dynamics():
    env = make_env(EnvSpec(family="chain_discrete", n_states=4, horizon=5))
    env.reset()
    rewards = [env.step([1.0])[0] for _ in range(4)]
    assert rewards == [0.0, 0.0, 1.0, 1.0]
    env.step([1.0])
    fast = make_env(EnvSpec(family="chain_discrete", n_states=5, shift_magnitude=1.0, horizon=5))
    fast.reset()
    assert fast.step([1.0])[1][0] == pytest.approx(0.5)
    with pytest.raises(RuntimeError):
        env.step([1.0])


def test_unknown_values():
    with pytest.raises(ConfigError):
        EnvSpec(family="cartpole")
    with pytest.raises(ConfigError):
        EnvSpec(shift_kind="gravity")
    with pytest.raises(ConfigError):
        EnvSpec(horizon=0)
    with pytest.raises(ConfigError):
        Controller(make_env(EnvSpec()), "superhuman")
    with pytest.raises(DatasetError):
        collect_dataset(EnvSpec(), "random", 0)


def test_collect_is_deterministic_and_sized():
    spec = EnvSpec(noise_std=0.05, horizon=15)
    a, b = collect_dataset(spec, "medium", 100, seed=9), collect_dataset(spec, "medium", 100, seed=9)
    assert a.n_transitions == 100 and len(a.trajectories[-1]) == 100 - 15 * 6
    assert all(np.array_equal(x.states, y.states) for x, y in zip(a.trajectories, b.trajectories))


@pytest.mark.parametrize("spec", [EnvSpec(noise_std=0.01, horizon=50),
                                  EnvSpec(noise_std=0.01, horizon=50, shift_magnitude=3.0),
                                  EnvSpec(family="chain_discrete", noise_std=0.1, horizon=12)])
def test_quality_ordering_over_seeds(spec):
    for seed in range(5):
        rand, med, exp = (mean_return(spec, q, 30, seed=seed) for q in ("random", "medium", "expert"))
        assert exp > med > rand


@pytest.mark.parametrize("shift", [0.0, 3.0])
def test_expert_reaches_goal(shift):
    spec = EnvSpec(shift_magnitude=shift, horizon=50, noise_std=0.01, seed=1)
    env = make_env(spec)
    ctrl = Controller(env, "expert", 2)
    hits = [reaches_goal(rollout(env, ctrl)[0], spec.goal) for _ in range(100)]
    assert np.mean(hits) >= 0.9


def test_reference_returns():
    zero = EnvSpec(reward_scale=0.0, horizon=10)
    assert reference_returns(zero, 10) == (0.0, 0.0)
    with pytest.raises(UndefinedScoreError):
        normalized_score(0.0, *reference_returns(zero, 10))
    spec = EnvSpec(horizon=30, noise_std=0.02, seed=3)
    pair = reference_returns(spec, 20)
    assert pair[1] >= pair[0] and pair == reference_returns(spec, 20)
    assert mean_return(zero, "random", 5) == 0.0
