"""Offline dataset container, its wire format, and the online trajectory buffer.

The dataset is columnar (one array per field) grouped by trajectory id.
The file format is fixed-width little-endian records behind an "RLCD"
magic header, so a 200k-transition file loads with one frombuffer call.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Transition", "OfflineDataset", "DatasetFormatError",
    "save_dataset", "load_dataset", "TrajectoryBuffer", "StoredTrajectory",
]

MAGIC = b"RLCD"
DATASET_VERSION = 1


class DatasetFormatError(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    trajectory_id: int


def _record_dtype(dim_s: int, dim_a: int) -> np.dtype:
    return np.dtype([
        ("traj", "<u4"),
        ("s", "<f4", (dim_s,)),
        ("a", "<f4", (dim_a,)),
        ("r", "<f4"),
        ("s2", "<f4", (dim_s,)),
        ("done", "u1"),
    ])


@dataclass
class OfflineDataset:
    env_name: str
    dim_s: int
    dim_a: int
    states: np.ndarray        # (n, dim_s) f32
    actions: np.ndarray       # (n, dim_a) f32
    rewards: np.ndarray       # (n,) f32
    next_states: np.ndarray   # (n, dim_s) f32
    dones: np.ndarray         # (n,) bool
    traj_ids: np.ndarray      # (n,) u32, non-decreasing
    policy_tag: str = ""
    seed: int = -1

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        for i in range(len(self)):
            yield Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                             self.next_states[i], bool(self.dones[i]), int(self.traj_ids[i]))

    def trajectory_slices(self) -> list[tuple[int, slice]]:
        """(trajectory_id, contiguous slice) in file order."""
        if len(self) == 0:
            return []
        ids = self.traj_ids
        starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]]))
        ends = np.append(starts[1:], len(ids))
        return [(int(ids[s]), slice(int(s), int(e))) for s, e in zip(starts, ends)]

    def returns_per_trajectory(self) -> np.ndarray:
        return np.array([self.rewards[sl].sum() for _, sl in self.trajectory_slices()])

    def validate(self, horizon: int | None = None) -> None:
        """Chaining and termination invariants over every trajectory."""
        if np.any(np.abs(self.actions) > 1.0 + 1e-6):
            raise ValueError("actions outside [-1, 1]")
        for tid, sl in self.trajectory_slices():
            s, s2 = self.states[sl], self.next_states[sl]
            if len(s) > 1 and not np.array_equal(s2[:-1], s[1:]):
                raise ValueError(f"trajectory {tid}: next_state chain broken")
            if not self.dones[sl][-1] and horizon is not None and len(s) != horizon:
                raise ValueError(f"trajectory {tid}: ends neither done nor at horizon")

    @staticmethod
    def from_transitions(env_name: str, dim_s: int, dim_a: int,
                         transitions: list[Transition], policy_tag: str = "",
                         seed: int = -1) -> "OfflineDataset":
        n = len(transitions)
        out = OfflineDataset(
            env_name, dim_s, dim_a,
            states=np.zeros((n, dim_s), np.float32),
            actions=np.zeros((n, dim_a), np.float32),
            rewards=np.zeros(n, np.float32),
            next_states=np.zeros((n, dim_s), np.float32),
            dones=np.zeros(n, bool),
            traj_ids=np.zeros(n, np.uint32),
            policy_tag=policy_tag, seed=seed,
        )
        for i, t in enumerate(transitions):
            out.states[i] = t.state
            out.actions[i] = t.action
            out.rewards[i] = t.reward
            out.next_states[i] = t.next_state
            out.dones[i] = t.done
            out.traj_ids[i] = t.trajectory_id
        return out


def save_dataset(dataset: OfflineDataset, path) -> None:
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.dim_s, dataset.dim_a))
    rec["traj"] = dataset.traj_ids
    rec["s"] = dataset.states
    rec["a"] = dataset.actions
    rec["r"] = dataset.rewards
    rec["s2"] = dataset.next_states
    rec["done"] = dataset.dones
    name = dataset.env_name.encode()
    tag = dataset.policy_tag.encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IH", DATASET_VERSION, len(name)))
        f.write(name)
        f.write(struct.pack("<IIQ", dataset.dim_s, dataset.dim_a, len(rec)))
        f.write(rec.tobytes())
        # trailing metadata: collection tag and seed
        f.write(struct.pack("<H", len(tag)))
        f.write(tag)
        f.write(struct.pack("<q", dataset.seed))


def load_dataset(path, expect_env: str | None = None) -> OfflineDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise DatasetFormatError("bad magic bytes: not a dataset file")
    off = 4
    version, nlen = struct.unpack_from("<IH", raw, off)
    off += 6
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    env_name = raw[off:off + nlen].decode()
    off += nlen
    dim_s, dim_a, count = struct.unpack_from("<IIQ", raw, off)
    off += 16
    if expect_env is not None and env_name != expect_env:
        raise DatasetFormatError(f"dataset is for {env_name!r}, expected {expect_env!r}")
    dtype = _record_dtype(dim_s, dim_a)
    need = count * dtype.itemsize
    if len(raw) - off < need:
        raise DatasetFormatError(
            f"truncated: {count} records need {need} bytes, have {len(raw) - off}")
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
    off += need
    policy_tag, seed = "", -1
    if off < len(raw):
        (tlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if len(raw) - off < tlen + 8:
            raise DatasetFormatError("truncated trailing metadata")
        policy_tag = raw[off:off + tlen].decode()
        off += tlen
        (seed,) = struct.unpack_from("<q", raw, off)
    return OfflineDataset(
        env_name, int(dim_s), int(dim_a),
        states=rec["s"].reshape(count, dim_s).copy(),
        actions=rec["a"].reshape(count, dim_a).copy(),
        rewards=rec["r"].copy(),
        next_states=rec["s2"].reshape(count, dim_s).copy(),
        dones=rec["done"].astype(bool),
        traj_ids=rec["traj"].copy(),
        policy_tag=policy_tag, seed=int(seed),
    )


# ---------------------------------------------------------------------------
# online buffer: whole trajectories, appended at episode end


@dataclass
class StoredTrajectory:
    states: np.ndarray           # (T+1, dim_s) f32
    actions: np.ndarray          # (T, dim_a) f32
    rewards: np.ndarray          # (T,) f32
    terminal: bool               # ended by failure (True) or horizon (False)
    offline_actions: np.ndarray  # (T+1, dim_a) f32, deterministic offline action per state
    uid: int = 0

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class TrajectoryBuffer:
    """Completed trajectories with eviction by total transition count."""

    capacity: int = 1_000_000
    _trajs: list[StoredTrajectory] = field(default_factory=list)
    _size: int = 0
    _next_uid: int = 0

    def __len__(self) -> int:
        return self._size

    @property
    def n_trajectories(self) -> int:
        return len(self._trajs)

    @property
    def trajectories(self) -> list[StoredTrajectory]:
        return self._trajs

    def add(self, states, actions, rewards, terminal: bool, offline_actions) -> StoredTrajectory:
        states = np.asarray(states, np.float32)
        actions = np.asarray(actions, np.float32)
        rewards = np.asarray(rewards, np.float32)
        offline_actions = np.asarray(offline_actions, np.float32)
        t = len(actions)
        if states.shape[0] != t + 1 or rewards.shape[0] != t or offline_actions.shape[0] != t + 1:
            raise ValueError("trajectory arrays disagree on length")
        traj = StoredTrajectory(states, actions, rewards, bool(terminal),
                                offline_actions, uid=self._next_uid)
        self._next_uid += 1
        self._trajs.append(traj)
        self._size += t
        while self._size > self.capacity and len(self._trajs) > 1:
            self._size -= len(self._trajs.pop(0))
        return traj

    def eligible(self, min_len: int) -> list[StoredTrajectory]:
        return [t for t in self._trajs if len(t) >= min_len]

    def sample_rl_pairs(self, rng: np.random.Generator, batch: int,
                        h: int) -> list[tuple[StoredTrajectory, int]]:
        """Uniform over all (trajectory, t) with h <= t <= T-1, with replacement."""
        trajs = self.eligible(h + 1)
        if not trajs:
            return []
        counts = np.array([len(t) - h for t in trajs])
        cum = np.cumsum(counts)
        draws = rng.integers(cum[-1], size=batch)
        which = np.searchsorted(cum, draws, side="right")
        return [(trajs[w], h + int(d - (cum[w - 1] if w else 0))) for w, d in zip(which, draws)]

    def window_channels(self, traj: StoredTrajectory, t: int, h: int) -> np.ndarray:
        """(dim_s + dim_a, h) channel-major window covering steps t-h .. t-1."""
        s = traj.states[t - h:t].T
        a = traj.actions[t - h:t].T
        return np.concatenate([s, a], axis=0)
