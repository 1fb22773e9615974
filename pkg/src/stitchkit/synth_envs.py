"""Small deterministic MDPs with tunable dynamics shifts and scripted data collectors.

``point_mass_2d``
    Position in the plane, actions are clipped velocity commands.  A Gaussian
    "wind" bump on the straight start-goal route blows against the direction of
    travel; ``dynamics_scale`` multiplies its strength by ``1 + magnitude``.  Once the
    peak wind exceeds the largest step the straight route stalls and only a detour
    around the bump reaches the goal.  Reward is the negative squared distance to
    the goal after the move.

``chain_discrete``
    A line of ``n_states`` cells observed as a scalar in [0, 1].  Actions are
    rounded to {-1, 0, +1}; reaching the right end pays 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ConfigError
from .datamodel import Dataset, DatasetError, Trajectory

FAMILIES = ("point_mass_2d", "chain_discrete")
SHIFT_KINDS = ("dynamics_scale", "action_clip", "state_affine")
QUALITIES = ("random", "medium", "expert")


@dataclass(frozen=True)
class EnvSpec:
    family: str = "point_mass_2d"
    shift_kind: str = "dynamics_scale"
    shift_magnitude: float = 0.0
    horizon: int = 40
    noise_std: float = 0.0
    seed: int = 0
    reward_scale: float = 1.0
    # point_mass_2d geometry
    start: tuple = (-1.0, 0.0)
    goal: tuple = (1.0, 0.0)
    step_size: float = 0.1
    wind: float = 0.04
    wind_dir: tuple = (-1.0, 0.0)     # headwind against the straight start-goal route
    wind_center: tuple = (0.0, 0.0)
    wind_radius: float = 0.35
    detour: float = 3.0               # waypoint offset, in wind radii, when the route is blocked
    start_noise: float = 0.05
    # chain_discrete
    n_states: int = 8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown env family {self.family!r}")
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.shift_kind!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.shift_kind == "action_clip" and self.shift_magnitude < 0:
            raise ConfigError("action_clip magnitude must be nonnegative")
        if self.family == "chain_discrete" and self.n_states < 2:
            raise ConfigError("chain needs at least two states")

    @property
    def state_dim(self) -> int:
        return 2 if self.family == "point_mass_2d" else 1

    @property
    def action_dim(self) -> int:
        return 2 if self.family == "point_mass_2d" else 1

    def with_shift(self, magnitude: float) -> "EnvSpec":
        return replace(self, shift_magnitude=magnitude)


# fixed mixing matrix of the state_affine shift (a small rotation-shear)
_AFFINE = np.array([[0.0, -0.5], [0.5, 0.2]])


class PointMass:
    def __init__(self, spec: EnvSpec, seed: int | None = None):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.goal = np.asarray(spec.goal, dtype=float)
        self.state = np.zeros(2)
        self.t = 0
        self.last_action = np.zeros(2)

    # -- dynamics pieces, public so controllers and tests can evaluate them --
    def wind_scale(self) -> float:
        sp = self.spec
        return 1.0 + sp.shift_magnitude if sp.shift_kind == "dynamics_scale" else 1.0

    def drift(self, s: np.ndarray) -> np.ndarray:
        sp = self.spec
        d = np.asarray(s, dtype=float) - np.asarray(sp.wind_center)
        bump = math.exp(-float(d @ d) / (2.0 * sp.wind_radius ** 2))
        return sp.wind * self.wind_scale() * bump * np.asarray(sp.wind_dir, dtype=float)

    def transition_matrix(self) -> np.ndarray:
        sp = self.spec
        if sp.shift_kind == "state_affine":
            return np.eye(2) + 0.1 * sp.shift_magnitude * _AFFINE
        return np.eye(2)

    def realize(self, a) -> np.ndarray:
        a = np.clip(np.asarray(a, dtype=float).reshape(2), -1.0, 1.0)
        sp = self.spec
        if sp.shift_kind == "action_clip" and sp.shift_magnitude > 0:
            a = np.clip(a, -sp.shift_magnitude, sp.shift_magnitude)
        return a

    def mean_next(self, s, a) -> np.ndarray:
        """Noise-free one-step update ``A s + h B a + drift(s)``."""
        s = np.asarray(s, dtype=float)
        if self.spec.shift_kind == "state_affine":
            # affine map about the goal, so the goal stays a fixed point; written as an
            # increment so that magnitude 0 reproduces the base dynamics bit for bit
            base = s + (self.transition_matrix() - np.eye(2)) @ (s - self.goal)
        else:
            base = s
        return base + self.spec.step_size * self.realize(a) + self.drift(s)

    def reward(self, s_next) -> float:
        d = np.asarray(s_next) - self.goal
        return -self.spec.reward_scale * float(d @ d)

    def reset(self) -> np.ndarray:
        sp = self.spec
        self.t = 0
        self.state = np.asarray(sp.start, dtype=float) + sp.start_noise * self.rng.standard_normal(2)
        return self.state.copy()

    def step(self, a):
        if self.t >= self.spec.horizon:
            raise RuntimeError("step() called after the episode ended; call reset()")
        self.last_action = self.realize(a)
        s2 = self.mean_next(self.state, a)
        if self.spec.noise_std > 0:
            s2 = s2 + self.spec.noise_std * self.rng.standard_normal(2)
        r = self.reward(s2)
        self.state = s2
        self.t += 1
        return r, s2.copy(), self.t >= self.spec.horizon


class Chain:
    def __init__(self, spec: EnvSpec, seed: int | None = None):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.pos = 0
        self.t = 0
        self.last_action = np.zeros(1)

    def observe(self, pos: int) -> np.ndarray:
        x = pos / (self.spec.n_states - 1)
        if self.spec.shift_kind == "state_affine":
            x = (1.0 + self.spec.shift_magnitude) * x + 0.1 * self.spec.shift_magnitude
        return np.array([x])

    def realize(self, a) -> np.ndarray:
        a = np.clip(np.asarray(a, dtype=float).reshape(1), -1.0, 1.0)
        sp = self.spec
        if sp.shift_kind == "action_clip" and sp.shift_magnitude > 0:
            a = np.clip(a, -sp.shift_magnitude, sp.shift_magnitude)
        return a

    def move(self, a) -> int:
        direction = int(np.rint(self.realize(a)[0]))
        stride = 1
        if self.spec.shift_kind == "dynamics_scale":
            stride = 1 + int(round(self.spec.shift_magnitude))
        return direction * stride

    def reset(self) -> np.ndarray:
        self.t = 0
        self.pos = 0
        return self.observe(self.pos)

    def step(self, a):
        if self.t >= self.spec.horizon:
            raise RuntimeError("step() called after the episode ended; call reset()")
        self.last_action = self.realize(a)
        delta = self.move(a)
        if self.spec.noise_std > 0 and self.rng.random() < min(self.spec.noise_std, 1.0):
            delta = 0      # slip
        self.pos = int(np.clip(self.pos + delta, 0, self.spec.n_states - 1))
        r = self.spec.reward_scale * float(self.pos == self.spec.n_states - 1)
        self.t += 1
        return r, self.observe(self.pos), self.t >= self.spec.horizon


def make_env(spec: EnvSpec, seed: int | None = None):
    if spec.family == "point_mass_2d":
        return PointMass(spec, seed)
    if spec.family == "chain_discrete":
        return Chain(spec, seed)
    raise ConfigError(f"unknown env family {spec.family!r}")


# -- scripted controllers ----------------------------------------------------

def route_blocked(env: PointMass) -> bool:
    """True when the peak wind beats most of a full step, so the straight route stalls."""
    return env.spec.wind * abs(env.wind_scale()) > 0.7 * env.spec.step_size


def _segment_gap(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Distance from point ``c`` to the segment ``a``-``b``."""
    d = b - a
    u = float(np.clip((c - a) @ d / max(float(d @ d), 1e-12), 0.0, 1.0))
    return float(np.linalg.norm(a + u * d - c))


def waypoint(env: PointMass, s) -> np.ndarray:
    """Detour below the wind bump until the straight leg to the goal clears it by two radii."""
    sp = env.spec
    s = np.asarray(s, dtype=float)
    center = np.asarray(sp.wind_center, dtype=float)
    if (route_blocked(env) and s[0] < center[0]
            and _segment_gap(s, env.goal, center) < 2.0 * sp.wind_radius):
        return np.array([center[0], center[1] - sp.detour * sp.wind_radius])
    return env.goal


class Controller:
    """Scripted behavior policy; ``expert`` knows the env it runs in."""

    def __init__(self, env, quality: str, seed: int = 0):
        if quality not in QUALITIES:
            raise ConfigError(f"unknown policy quality {quality!r}")
        self.env, self.quality = env, quality
        self.rng = np.random.default_rng(seed)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        env = self.env
        dim = env.spec.action_dim
        if self.quality == "random":
            return self.rng.uniform(-1.0, 1.0, size=dim)
        if isinstance(env, PointMass):
            return self._point_mass(s)
        return self._chain()

    def _point_mass(self, s):
        env = self.env
        h = env.spec.step_size
        aim = waypoint(env, s)
        if self.quality == "expert":
            # aim the noise-free next state at the waypoint, cancelling the wind
            return np.clip((aim - env.mean_next(s, np.zeros(2))) / h, -1.0, 1.0)
        # medium: wind-blind steering along the same route with exploration noise
        a = (aim - s) / max(np.linalg.norm(aim - s), 0.3)
        return np.clip(a + 0.3 * self.rng.standard_normal(2), -1.0, 1.0)

    def _chain(self):
        if self.quality == "expert":
            return np.array([1.0])
        return np.array([1.0 if self.rng.random() < 0.6 else -1.0])


def rollout(env, policy, seed: int | None = None, domain: str = "target") -> tuple[Trajectory, float]:
    s = env.reset()
    S, A, R, S2 = [], [], [], []
    done = False
    while not done:
        a = policy(s)
        r, s2, done = env.step(a)
        S.append(s)
        A.append(env.last_action.copy())
        R.append(r)
        S2.append(s2)
        s = s2
    traj = Trajectory(states=S, actions=A, rewards=R, next_states=S2, timesteps=np.arange(len(R)),
                      masks=np.ones(len(R)), domain=domain)
    return traj, float(np.sum(R))


def collect_dataset(spec: EnvSpec, policy_quality: str, n_transitions: int, domain: str = "target",
                    seed: int | None = None) -> Dataset:
    """Roll the scripted controller until ``n_transitions`` steps are logged (the last episode is truncated)."""
    if n_transitions <= 0:
        raise DatasetError("n_transitions must be positive; an empty dataset has no trajectories")
    seed = spec.seed if seed is None else seed
    env = make_env(spec, seed)
    ctrl = Controller(env, policy_quality, seed + 1)
    trajs, total = [], 0
    while total < n_transitions:
        traj, _ = rollout(env, ctrl, domain=domain)
        keep = min(len(traj), n_transitions - total)
        if keep < len(traj):
            f = {k: getattr(traj, k)[:keep] for k in ("states", "actions", "rewards", "next_states", "timesteps", "masks")}
            traj = Trajectory(**f, domain=domain)
        trajs.append(traj)
        total += keep
    return Dataset.from_trajectories(trajs, meta={"family": spec.family, "quality": policy_quality,
                                                  "shift_kind": spec.shift_kind,
                                                  "shift_magnitude": spec.shift_magnitude})


def mean_return(spec: EnvSpec, quality: str, episodes: int = 100, seed: int | None = None) -> float:
    seed = spec.seed if seed is None else seed
    env = make_env(spec, seed)
    ctrl = Controller(env, quality, seed + 1)
    return float(np.mean([rollout(env, ctrl)[1] for _ in range(episodes)]))


def reference_returns(spec: EnvSpec, episodes: int = 100, seed: int | None = None) -> tuple[float, float]:
    """Monte-Carlo ``(J_rand, J_exp)`` of the scripted random and expert controllers."""
    return mean_return(spec, "random", episodes, seed), mean_return(spec, "expert", episodes, seed)


def reaches_goal(traj: Trajectory, goal, tol: float = 0.1) -> bool:
    return bool(np.any(np.linalg.norm(traj.next_states - np.asarray(goal), axis=1) <= tol))
