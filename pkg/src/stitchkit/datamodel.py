"""Trajectory containers, fragment windows, and the line-oriented dataset file format.

File layout (ASCII, one transition per line)::

    # stitchkit trajectories v1
    # domain: source
    # config_hash: 3f2a...
    2 2 d_m d_w
    0 0 0.1 0.2 0.5 -0.5 -1.2 0.15 0.1 1 0.03 -0.4
    ...

Lines starting with ``#`` are metadata (``key: value``) or comments. The first
non-comment line is the header: ``state_dim action_dim`` followed by the names of
optional trailing columns (any of ``d_m``, ``d_w``, ``A``). Each record is
``traj_id step s[0..n) a[0..m) r s'[0..n) mask`` plus the optional columns.
Floats are written with ``repr`` so that save/load is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OPTIONAL_COLUMNS = ("d_m", "d_w", "A")
DOMAINS = ("source", "target")


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    timestep: int
    mask: int = 1
    d_m: float | None = None
    d_w: float | None = None


def _column(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Column-major storage of one episode (or episode piece).

    ``d_m``/``d_w``/``adv`` are optional per-step score columns attached by the
    filtering and relabeling stages.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    timesteps: np.ndarray
    masks: np.ndarray
    domain: str = "target"
    d_m: np.ndarray | None = None
    d_w: np.ndarray | None = None
    adv: np.ndarray | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        if len(self.rewards) == 0:
            raise SchemaError("zero-length trajectory")
        set_(self, "states", _column(self.states).reshape(len(self.states), -1))
        set_(self, "actions", _column(self.actions).reshape(len(self.actions), -1))
        set_(self, "next_states", _column(self.next_states).reshape(len(self.next_states), -1))
        set_(self, "rewards", _column(self.rewards).reshape(-1))
        set_(self, "timesteps", _column(self.timesteps, np.int64).reshape(-1))
        set_(self, "masks", _column(self.masks, np.int64).reshape(-1))
        for name in ("d_m", "d_w", "adv"):
            value = getattr(self, name)
            if value is not None:
                set_(self, name, _column(value).reshape(-1))
        self.validate()

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def validate(self) -> None:
        T = len(self.rewards)
        if T == 0:
            raise SchemaError("zero-length trajectory")
        if self.domain not in DOMAINS:
            raise SchemaError(f"unknown domain tag {self.domain!r}")
        for name in ("states", "actions", "next_states", "timesteps", "masks"):
            if len(getattr(self, name)) != T:
                raise SchemaError(f"column {name} has {len(getattr(self, name))} rows, expected {T}")
        if self.states.shape != self.next_states.shape:
            raise SchemaError("state and next_state dimensions differ")
        for name in ("d_m", "d_w", "adv"):
            value = getattr(self, name)
            if value is not None and len(value) != T:
                raise SchemaError(f"column {name} has {len(value)} rows, expected {T}")
        if not np.isin(self.masks, (0, 1)).all():
            raise SchemaError("mask entries must be 0 or 1")
        pad = self.masks == 0
        if pad.any():
            numeric = (self.states[pad], self.actions[pad], self.rewards[pad],
                       self.next_states[pad], self.timesteps[pad])
            if any(np.any(a != 0) for a in numeric):
                raise SchemaError("padding entries (mask=0) must be all zero")
        if self.d_w is not None and np.any(self.d_w[~np.isnan(self.d_w)] > 0):
            raise SchemaError("d_w must be <= 0")
        live = np.flatnonzero(~pad)
        if np.any(self.timesteps[live] < 0):
            raise SchemaError("negative timestep")
        if np.any(np.diff(self.timesteps[live]) <= 0):
            raise ParseError("timesteps not increasing")
        if len(live) > 1:
            consecutive = live[:-1][np.diff(live) == 1]
            if not np.array_equal(self.next_states[consecutive], self.states[consecutive + 1]):
                raise ParseError("next_state does not chain into the following state")

    def transitions(self) -> list[Transition]:
        out = []
        for t in range(len(self)):
            out.append(Transition(
                state=self.states[t], action=self.actions[t], reward=float(self.rewards[t]),
                next_state=self.next_states[t], timestep=int(self.timesteps[t]),
                mask=int(self.masks[t]),
                d_m=None if self.d_m is None else float(self.d_m[t]),
                d_w=None if self.d_w is None else float(self.d_w[t]),
            ))
        return out

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], domain: str = "target") -> "Trajectory":
        if not transitions:
            raise SchemaError("zero-length trajectory")
        has_dm = all(tr.d_m is not None for tr in transitions)
        has_dw = all(tr.d_w is not None for tr in transitions)
        return cls(
            states=[tr.state for tr in transitions],
            actions=[tr.action for tr in transitions],
            rewards=[tr.reward for tr in transitions],
            next_states=[tr.next_state for tr in transitions],
            timesteps=[tr.timestep for tr in transitions],
            masks=[tr.mask for tr in transitions],
            domain=domain,
            d_m=[tr.d_m for tr in transitions] if has_dm else None,
            d_w=[tr.d_w for tr in transitions] if has_dw else None,
        )

    def with_columns(self, **columns) -> "Trajectory":
        return replace(self, **columns)


@dataclass(frozen=True)
class Fragment:
    parent: int
    start: int
    length: int
    junction_flags: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("fragment length must be positive")
        if not self.junction_flags:
            object.__setattr__(self, "junction_flags", (False,) * self.length)
        elif len(self.junction_flags) != self.length:
            raise ValueError("junction_flags must have one entry per step")

    @property
    def stop(self) -> int:
        return self.start + self.length

    def states(self, dataset: "Dataset") -> np.ndarray:
        return dataset.trajectories[self.parent].states[self.start:self.stop]


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    state_dim: int
    action_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if self.state_dim <= 0 or self.action_dim <= 0:
            raise SchemaError("state_dim and action_dim must be positive")
        for i, traj in enumerate(self.trajectories):
            if traj.state_dim != self.state_dim or traj.action_dim != self.action_dim:
                raise SchemaError(
                    f"trajectory {i} has dims ({traj.state_dim}, {traj.action_dim}), "
                    f"dataset declares ({self.state_dim}, {self.action_dim})")

    @classmethod
    def from_trajectories(cls, trajectories: Iterable[Trajectory], meta: dict | None = None) -> "Dataset":
        trajectories = tuple(trajectories)
        if not trajectories:
            raise SchemaError("no trajectories")
        return cls(trajectories, trajectories[0].state_dim, trajectories[0].action_dim, dict(meta or {}))

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def domain(self) -> str:
        tags = {t.domain for t in self.trajectories}
        return tags.pop() if len(tags) == 1 else "mixed"

    def has_column(self, name: str) -> bool:
        attr = "adv" if name == "A" else name
        return bool(self.trajectories) and all(getattr(t, attr) is not None for t in self.trajectories)

    @cached_property
    def flat(self) -> dict[str, np.ndarray]:
        """All transitions stacked, with ``traj`` / ``step`` back-references."""
        trajs = self.trajectories
        out = {
            "states": np.concatenate([t.states for t in trajs]),
            "actions": np.concatenate([t.actions for t in trajs]),
            "rewards": np.concatenate([t.rewards for t in trajs]),
            "next_states": np.concatenate([t.next_states for t in trajs]),
            "timesteps": np.concatenate([t.timesteps for t in trajs]),
            "masks": np.concatenate([t.masks for t in trajs]),
            "traj": np.concatenate([np.full(len(t), i) for i, t in enumerate(trajs)]),
            "step": np.concatenate([np.arange(len(t)) for t in trajs]),
        }
        for name in ("d_m", "d_w", "adv"):
            if all(getattr(t, name) is not None for t in trajs):
                out[name] = np.concatenate([getattr(t, name) for t in trajs])
        for arr in out.values():
            arr.setflags(write=False)
        return out

    @cached_property
    def stats(self) -> dict[str, np.ndarray]:
        live = self.flat["masks"] == 1
        states = self.flat["states"][live]
        return {"mean": states.mean(axis=0), "std": states.std(axis=0)}

    def replace_trajectories(self, trajectories: Iterable[Trajectory], **meta) -> "Dataset":
        return Dataset(tuple(trajectories), self.state_dim, self.action_dim, {**self.meta, **meta})

    def with_flat_column(self, name: str, values: np.ndarray) -> "Dataset":
        """Split a per-transition array back over trajectories as column ``name``."""
        values = np.asarray(values, dtype=float)
        if len(values) != self.n_transitions:
            raise SchemaError(f"column {name} has {len(values)} entries, expected {self.n_transitions}")
        attr = "adv" if name == "A" else name
        bounds = np.cumsum([0] + [len(t) for t in self.trajectories])
        return self.replace_trajectories(
            t.with_columns(**{attr: values[a:b]}) for t, a, b in zip(self.trajectories, bounds[:-1], bounds[1:]))


# -- fragments ---------------------------------------------------------------

def fragment_starts(n_steps: int, length: int, stride: int, cover_tail: bool = False) -> list[int]:
    """Window offsets ``0, stride, 2*stride, ...`` that fit inside ``n_steps``.

    With ``cover_tail`` an extra end-anchored window is appended when the regular
    offsets leave trailing steps uncovered.
    """
    if length <= 0 or stride <= 0:
        raise ValueError("length and stride must be positive")
    if n_steps < length:
        return []
    starts = list(range(0, n_steps - length + 1, stride))
    if cover_tail and starts[-1] + length < n_steps:
        starts.append(n_steps - length)
    return starts


def fragment_assignment(n_steps: int, starts: Sequence[int], length: int) -> np.ndarray:
    """Map each step to the latest fragment starting at or before it that contains it (-1 if none)."""
    owner = np.full(n_steps, -1, dtype=np.int64)
    for k, s in enumerate(starts):
        owner[s:s + length] = k
    return owner


def extract_fragments(d: Dataset, length: int, stride: int) -> list[Fragment]:
    frags = [Fragment(i, s, length)
             for i, traj in enumerate(d.trajectories)
             for s in fragment_starts(len(traj), length, stride)]
    if not frags:
        longest = max(len(t) for t in d.trajectories)
        raise DatasetError(f"no fragments: length {length} exceeds every trajectory (longest has {longest} steps)")
    return frags


# -- file I/O ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(d: Dataset, path: str | Path, meta: dict | None = None) -> None:
    for traj in d.trajectories:
        traj.validate()
    if not d.trajectories:
        raise SchemaError("no trajectories")
    domain = d.domain
    if domain == "mixed":
        raise SchemaError("cannot persist a dataset with mixed domain tags")
    extras = [name for name in OPTIONAL_COLUMNS if d.has_column(name)]
    merged = {"domain": domain, **d.meta, **(meta or {})}
    lines = ["# stitchkit trajectories v1"]
    lines += [f"# {k}: {v}" for k, v in merged.items()]
    lines.append(" ".join([str(d.state_dim), str(d.action_dim), *extras]))
    for i, traj in enumerate(d.trajectories):
        cols = {"d_m": traj.d_m, "d_w": traj.d_w, "A": traj.adv}
        for t in range(len(traj)):
            fields = [str(i), str(int(traj.timesteps[t]))]
            fields += [_fmt(x) for x in traj.states[t]]
            fields += [_fmt(x) for x in traj.actions[t]]
            fields.append(_fmt(traj.rewards[t]))
            fields += [_fmt(x) for x in traj.next_states[t]]
            fields.append(str(int(traj.masks[t])))
            fields += [_fmt(cols[name][t]) for name in extras]
            lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    meta: dict[str, str] = {}
    header = None
    rows: dict[int, list[list[float]]] = {}
    order: list[int] = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    meta[key.strip()] = value.strip()
                continue
            parts = line.split()
            if header is None:
                try:
                    n, m = int(parts[0]), int(parts[1])
                except (ValueError, IndexError):
                    raise ParseError(f"{path}:{lineno}: header must start with 'state_dim action_dim'")
                extras = parts[2:]
                unknown = set(extras) - set(OPTIONAL_COLUMNS)
                if unknown:
                    raise ParseError(f"{path}:{lineno}: unknown column(s) {sorted(unknown)}")
                header = (n, m, extras)
                width = 2 + n + m + 1 + n + 1 + len(extras)
                continue
            if len(parts) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
            try:
                tid = int(parts[0])
                values = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}")
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            rows[tid].append(values)
    if header is None or not rows:
        raise SchemaError(f"{path}: no trajectories")
    n, m, extras = header
    domain = meta.pop("domain", "target")
    trajectories = []
    for tid in order:
        block = np.asarray(rows[tid], dtype=float)
        cols = {}
        offset = 2 + n + m + 1 + n + 1 - 1  # first optional column within ``values``
        for j, name in enumerate(extras):
            cols["adv" if name == "A" else name] = block[:, offset + j]
        steps = block[:, 0]
        if np.any(steps != np.round(steps)):
            raise ParseError(f"{path}: trajectory {tid} has non-integer step")
        try:
            trajectories.append(Trajectory(
                states=block[:, 1:1 + n],
                actions=block[:, 1 + n:1 + n + m],
                rewards=block[:, 1 + n + m],
                next_states=block[:, 2 + n + m:2 + 2 * n + m],
                timesteps=steps.astype(np.int64),
                masks=block[:, 2 + 2 * n + m].astype(np.int64),
                domain=domain,
                **cols,
            ))
        except DatasetError as exc:
            raise type(exc)(f"{path}: trajectory {tid}: {exc}")
    return Dataset(tuple(trajectories), n, m, meta)
