"""Offline side of the protocol: collect datasets at nominal dynamics,
train the frozen policy by behavior cloning, measure reference returns.

Collection trains a fresh SAC agent online with all scales pinned to 1
and keeps every transition ("replay" flavor).  A snapshot of the actor
at the halfway point rolls extra evaluation episodes for the "medium"
flavor.  Reference returns (uniform-random and final-policy) calibrate
normalized scores.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .data import OfflineDataset, Transition
from .envs import DynamicsEnv, EnvParams, make_env
from .sac import FlatReplay, SACAgent, SACConfig
from .seeding import stream

__all__ = [
    "OfflinePolicy", "CollectionResult", "collect_dataset",
    "train_offline", "BCResult", "rollout_return", "mean_return",
    "save_offline_policy", "load_offline_policy",
]

NOMINAL = EnvParams()

RANDOM_WARMUP_STEPS = 1000
EVAL_INTERVAL = 5000
EVAL_EPISODES = 10
MEDIUM_EPISODES = 200
REFERENCE_EPISODES = 100


class OfflinePolicy:
    """Frozen tanh-Gaussian MLP policy cloned from a dataset."""

    def __init__(self, store: nn.ParamStore, dim_s: int, dim_a: int, hidden: list[int]):
        self.store = store
        self.dim_s = dim_s
        self.dim_a = dim_a
        self.hidden = list(hidden)
        self.frozen = False

    def freeze(self) -> "OfflinePolicy":
        self.frozen = True
        return self

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.store.names():
            h.update(name.encode())
            h.update(self.store[name].tobytes())
        return h.hexdigest()

    def heads(self, states: np.ndarray):
        x = np.asarray(states, np.float32)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.dim_s:
            raise ValueError(f"state dim {x.shape[1]} != {self.dim_s}")
        with ad.tape():
            mean, log_std = nn.policy_heads(self.store.bind(trainable=False), "pi",
                                            ad.constant(x), len(self.hidden))
        return mean.value, log_std.value

    def act(self, state: np.ndarray, deterministic: bool = True,
            rng: np.random.Generator | None = None) -> np.ndarray:
        single = np.asarray(state).ndim == 1
        mean, log_std = self.heads(state)
        if deterministic:
            a = np.tanh(mean)
        else:
            if rng is None:
                raise ValueError("stochastic action needs an rng")
            a = np.tanh(mean + np.exp(log_std) * rng.standard_normal(mean.shape))
        return a[0] if single else a


def save_offline_policy(path, policy: OfflinePolicy) -> None:
    entries = {"offline." + k: v for k, v in policy.store.state_entries(False).items()}
    entries["offline.meta.dims"] = np.array(
        [policy.dim_s, policy.dim_a] + policy.hidden, np.float32)
    nn.write_entries(path, entries)


def load_offline_policy(path) -> OfflinePolicy:
    entries = nn.read_entries(path)
    meta = entries.pop("offline.meta.dims").astype(int)
    store = nn.ParamStore()
    for k, v in entries.items():
        if k.startswith("offline."):
            store.add(k[len("offline."):], v)
    return OfflinePolicy(store, int(meta[0]), int(meta[1]), list(meta[2:])).freeze()


# ---------------------------------------------------------------------------
# rollout helpers


def rollout_return(env: DynamicsEnv, act, rng: np.random.Generator,
                   override: EnvParams | None = None) -> float:
    """One episode's raw return; act(observation) -> action."""
    state = env.reset(rng, override)
    total = 0.0
    done = False
    while not done:
        state, reward, done = env.step(act(state.observation))
        total += reward
    return total


def mean_return(env: DynamicsEnv, act, rng: np.random.Generator, episodes: int,
                override: EnvParams | None = None) -> float:
    return float(np.mean([rollout_return(env, act, rng, override) for _ in range(episodes)]))


# ---------------------------------------------------------------------------
# collection


@dataclass
class CollectionResult:
    dataset: OfflineDataset                 # replay flavor: the entire buffer
    medium_dataset: OfflineDataset          # rollouts of the half-trained policy
    eval_log: list[tuple[int, float]]       # (step, mean eval return at nominal)
    random_return: float
    expert_return: float

    @property
    def final_eval_return(self) -> float:
        return self.eval_log[-1][1]

    def reference_returns(self) -> tuple[float, float]:
        return (self.random_return, self.expert_return)


def collect_dataset(env_name: str, seed: int, total_steps: int,
                    medium_episodes: int = MEDIUM_EPISODES,
                    reference_episodes: int = REFERENCE_EPISODES,
                    on_progress=None) -> CollectionResult:
    """Train SAC at nominal dynamics for total_steps and keep everything."""
    env = make_env(env_name)
    if total_steps < env.horizon:
        raise ValueError(f"total_steps {total_steps} is below one horizon ({env.horizon})")

    env_rng = stream(seed, "env")
    agent_rng = stream(seed, "agent")
    train_rng = stream(seed, "train")

    agent = SACAgent(SACConfig(dim_in=env.dim_s, dim_a=env.dim_a), stream(seed, "init:collector"))
    replay = FlatReplay(capacity=max(total_steps, 1), dim_s=env.dim_s, dim_a=env.dim_a)

    transitions: list[Transition] = []
    eval_log: list[tuple[int, float]] = []
    half_actor: nn.ParamStore | None = None

    state = env.reset(env_rng, NOMINAL)
    traj_id = 0
    for step_i in range(total_steps):
        obs = state.observation.astype(np.float32)
        if step_i < RANDOM_WARMUP_STEPS:
            action = agent_rng.uniform(-1.0, 1.0, env.dim_a)
        else:
            action = agent.act(obs, deterministic=False, rng=agent_rng)
        nxt, reward, done = env.step(action)
        failed = env.terminated_by_failure
        replay.add(obs, action, reward, nxt.observation, failed)
        transitions.append(Transition(
            obs.copy(), np.asarray(action, np.float32), float(reward),
            nxt.observation.astype(np.float32), bool(done), traj_id))
        state = nxt
        if done:
            state = env.reset(env_rng, NOMINAL)
            traj_id += 1

        if step_i >= RANDOM_WARMUP_STEPS:
            agent.update(replay.sample(train_rng, agent.cfg.batch_size), train_rng)

        if step_i + 1 == total_steps // 2:
            half_actor = agent.actor.clone_params()
        if (step_i + 1) % EVAL_INTERVAL == 0 or step_i + 1 == total_steps:
            eval_rng = stream(seed, "eval", step_i + 1)
            eval_env = make_env(env_name)
            ret = mean_return(eval_env, lambda o: agent.act(o, deterministic=True),
                              eval_rng, EVAL_EPISODES, NOMINAL)
            eval_log.append((step_i + 1, ret))
            if on_progress is not None:
                on_progress(step_i + 1, ret)

    dataset = OfflineDataset.from_transitions(
        env_name, env.dim_s, env.dim_a, transitions, policy_tag="replay", seed=seed)

    # medium flavor: deterministic rollouts of the halfway snapshot
    half_policy = SACAgent(SACConfig(dim_in=env.dim_s, dim_a=env.dim_a),
                           stream(seed, "init:collector"))
    half_policy.actor = half_actor if half_actor is not None else agent.actor.clone_params()
    med_rng = stream(seed, "medium")
    med_env = make_env(env_name)
    med_transitions: list[Transition] = []
    for ep in range(medium_episodes):
        s = med_env.reset(med_rng, NOMINAL)
        done = False
        while not done:
            obs = s.observation.astype(np.float32)
            a = half_policy.act(obs, deterministic=True)
            s, r, done = med_env.step(a)
            med_transitions.append(Transition(
                obs, np.asarray(a, np.float32), float(r),
                s.observation.astype(np.float32), bool(done), ep))
    medium = OfflineDataset.from_transitions(
        env_name, env.dim_s, env.dim_a, med_transitions, policy_tag="medium", seed=seed)

    # reference returns for score normalization
    ref_rng = stream(seed, "reference")
    ref_env = make_env(env_name)
    random_ret = mean_return(ref_env, lambda o: ref_rng.uniform(-1, 1, env.dim_a),
                             ref_rng, reference_episodes, NOMINAL)
    expert_ret = mean_return(ref_env, lambda o: agent.act(o, deterministic=True),
                             ref_rng, reference_episodes, NOMINAL)

    return CollectionResult(dataset, medium, eval_log, random_ret, expert_ret)


# ---------------------------------------------------------------------------
# behavior cloning


@dataclass
class BCResult:
    policy: OfflinePolicy
    epoch_losses: list[float] = field(default_factory=list)
    holdout_loss: float = float("nan")

    @property
    def final_train_loss(self) -> float:
        return self.epoch_losses[-1]


def train_offline(dataset: OfflineDataset, epochs: int = 200, seed: int = 0,
                  batch_size: int = 256, lr: float = 3e-4,
                  hidden: list[int] | None = None, holdout_frac: float = 0.1,
                  on_epoch=None) -> BCResult:
    """Clone the dataset's actions: minimize tanh-Gaussian NLL."""
    if len(dataset) == 0:
        raise ValueError("cannot clone from an empty dataset")
    hidden = hidden or [256, 256]
    rng = stream(seed, "train")
    store = nn.ParamStore()
    nn.init_policy(store, "pi", dataset.dim_s, dataset.dim_a, hidden, stream(seed, "init:bc"))
    n_hidden = len(hidden)

    n = len(dataset)
    perm = rng.permutation(n)
    n_hold = int(round(n * holdout_frac))
    hold_idx = perm[:n_hold]
    train_idx = perm[n_hold:]
    states = dataset.states
    actions = dataset.actions

    def nll_batch(idx, bound):
        mean, log_std = nn.policy_heads(bound, "pi", ad.constant(states[idx]), n_hidden)
        logp = nn.squashed_gaussian_logp(mean, log_std, actions[idx])
        return ad.neg(ad.reduce_mean(logp))

    epoch_losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_idx))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = train_idx[order[lo:lo + batch_size]]
            with ad.tape():
                bound = store.bind()
                loss = nll_batch(idx, bound)
                ad.backward(loss)
                store.adam_step(bound, lr)
            total += float(loss.value) * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])

    # held-out NLL, evaluated without gradients in large chunks
    hold_total = 0.0
    for lo in range(0, len(hold_idx), 4096):
        idx = hold_idx[lo:lo + 4096]
        with ad.tape():
            loss = nll_batch(idx, store.bind(trainable=False))
        hold_total += float(loss.value) * len(idx)
    holdout = hold_total / max(len(hold_idx), 1)

    policy = OfflinePolicy(store, dataset.dim_s, dataset.dim_a, hidden).freeze()
    return BCResult(policy, epoch_losses, holdout)
