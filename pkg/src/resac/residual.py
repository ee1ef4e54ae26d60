"""Residual acting on top of a frozen offline policy.

The executed action blends the offline policy's deterministic action with
a learned correction, weighted by a fixed mixing coefficient.  The
correction policy sees an augmented state: the observation, the offline
action about to be blended, and the dynamics context inferred from the
episode's trailing window.  The first `window` steps of every episode run
the offline policy alone because no full window exists yet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .context import ContextModel
from .data import TrajectoryBuffer
from .envs import DynamicsEnv, EnvParams
from .offline import OfflinePolicy
from .sac import SACAgent

__all__ = ["compose_action", "compose_var", "EpisodeHistory", "build_residual_state",
           "run_episode", "EpisodeResult", "RLBatch", "sample_rl_batch",
           "residual_update"]


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"mixing coefficient must lie in [0, 1], got {alpha}")
    return alpha


def compose_action(a_offline: np.ndarray, a_residual: np.ndarray,
                   alpha: float) -> np.ndarray:
    """alpha * offline + (1 - alpha) * residual, clipped to the unit box.

    The boundary values return the respective input bitwise.
    """
    alpha = _check_alpha(alpha)
    a_offline = np.asarray(a_offline, np.float32)
    a_residual = np.asarray(a_residual, np.float32)
    if alpha == 1.0:
        return a_offline.copy()
    if alpha == 0.0:
        return a_residual.copy()
    mixed = np.float32(alpha) * a_offline + np.float32(1.0 - alpha) * a_residual
    return np.clip(mixed, -1.0, 1.0)


def compose_var(a_residual: ad.Var, a_offline: np.ndarray, alpha: float) -> ad.Var:
    """Graph-side mixing; the offline contribution is a constant."""
    alpha = _check_alpha(alpha)
    off = np.float32(alpha) * np.asarray(a_offline, np.float32)
    mixed = ad.add(ad.mul(a_residual, np.float32(1.0 - alpha)), ad.constant(off))
    return ad.clamp(mixed, -1.0, 1.0)


class EpisodeHistory:
    """States and executed actions of the running episode."""

    def __init__(self, dim_s: int, dim_a: int, first_state: np.ndarray):
        self.dim_s, self.dim_a = dim_s, dim_a
        self.states: list[np.ndarray] = [np.asarray(first_state, np.float32)]
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []

    def __len__(self) -> int:
        return len(self.actions)

    def push(self, action: np.ndarray, reward: float, next_state: np.ndarray) -> None:
        self.actions.append(np.asarray(action, np.float32))
        self.rewards.append(float(reward))
        self.states.append(np.asarray(next_state, np.float32))

    def window(self, h: int) -> np.ndarray:
        """(dim_s + dim_a, h) channels over the last h completed steps."""
        if len(self) < h:
            raise ValueError(f"history has {len(self)} steps, window needs {h}")
        s = np.stack(self.states[-h - 1:-1]).T
        a = np.stack(self.actions[-h:]).T
        return np.concatenate([s, a], axis=0)

    def arrays(self):
        return (np.stack(self.states), np.stack(self.actions),
                np.asarray(self.rewards, np.float32))


def build_residual_state(state: np.ndarray, offline: OfflinePolicy,
                         context: ContextModel, history: EpisodeHistory) -> np.ndarray:
    """[observation, deterministic offline action, context] as one vector."""
    a_off = offline.act(state, deterministic=True)
    z = context.encode(history.window(context.cfg.window))
    return np.concatenate([np.asarray(state, np.float32), a_off, z])


@dataclass
class EpisodeResult:
    states: np.ndarray           # (T+1, dim_s)
    actions: np.ndarray          # (T,  dim_a) executed total actions
    rewards: np.ndarray          # (T,)
    terminal: bool               # failure ending (no bootstrap), not horizon
    offline_actions: np.ndarray  # (T+1, dim_a) deterministic offline action per state
    episode_return: float
    mean_abs_residual: float     # 0.0 when no post-warmup step ran

    def add_to(self, buffer: TrajectoryBuffer):
        return buffer.add(self.states, self.actions, self.rewards,
                          self.terminal, self.offline_actions)


def run_episode(env: DynamicsEnv, offline: OfflinePolicy, context: ContextModel,
                agent: SACAgent, alpha: float, env_rng: np.random.Generator,
                agent_rng: np.random.Generator | None = None, *,
                deterministic: bool = False, on_step=None,
                override: EnvParams | None = None) -> EpisodeResult:
    """One full episode of warmup-then-residual acting.

    on_step() fires after each transition is recorded, so training callbacks
    see everything up to and including the current step.  override pins the
    episode's dynamics instead of drawing them from the env's distribution.
    """
    alpha = _check_alpha(alpha)
    h = context.cfg.window
    state = env.reset(env_rng, override)
    hist = EpisodeHistory(env.dim_s, env.dim_a, state.observation)
    residual_mags: list[float] = []
    # cache the exact per-step offline actions; a batched recomputation can
    # differ in the last bit and warmup actions must stay bitwise-traceable
    off_actions: list[np.ndarray] = []
    done = False
    while not done:
        obs = hist.states[-1]
        if len(hist) < h:
            action = offline.act(obs, deterministic=True)
            off_actions.append(action)
        else:
            rs = build_residual_state(obs, offline, context, hist)
            a_off = rs[env.dim_s:env.dim_s + env.dim_a]
            off_actions.append(a_off)
            a_res = agent.act(rs, deterministic, agent_rng)
            residual_mags.append(float(np.abs(a_res).mean()))
            action = compose_action(a_off, a_res, alpha)
        state, reward, done = env.step(action)
        hist.push(action, reward, state.observation)
        if on_step is not None:
            on_step()
    off_actions.append(offline.act(hist.states[-1], deterministic=True))
    states, actions, rewards = hist.arrays()
    return EpisodeResult(
        states=states, actions=actions, rewards=rewards,
        terminal=env.terminated_by_failure,
        offline_actions=np.stack(off_actions),
        episode_return=float(rewards.sum()),
        mean_abs_residual=float(np.mean(residual_mags)) if residual_mags else 0.0,
    )


@dataclass
class RLBatch:
    state: np.ndarray          # (B, dim_s + dim_a + latent)
    action: np.ndarray         # (B, dim_a) executed total action
    reward: np.ndarray         # (B,)
    next_state: np.ndarray     # (B, dim_s + dim_a + latent)
    done: np.ndarray           # (B,) failure at the trajectory's last step only
    offline_action: np.ndarray       # (B, dim_a) for mixing in the actor graph
    next_offline_action: np.ndarray  # (B, dim_a) for mixing in the target graph


def sample_rl_batch(buffer: TrajectoryBuffer, rng: np.random.Generator,
                    batch_size: int, context: ContextModel):
    """Transitions with contexts recomputed by the current encoder.

    Returns (RLBatch | None, skip reason).  Indices below the window
    length are never drawn; they lack a full window.
    """
    h = context.cfg.window
    pairs = buffer.sample_rl_pairs(rng, batch_size, h)
    if not pairs:
        return None, f"no trajectory of length >= {h + 1} in buffer"
    windows = np.stack([buffer.window_channels(traj, t, h) for traj, t in pairs] +
                       [buffer.window_channels(traj, t + 1, h) for traj, t in pairs])
    z_all = context.encode(windows)
    b = len(pairs)
    z_t, z_t1 = z_all[:b], z_all[b:]

    s = np.stack([traj.states[t] for traj, t in pairs])
    s1 = np.stack([traj.states[t + 1] for traj, t in pairs])
    off_t = np.stack([traj.offline_actions[t] for traj, t in pairs])
    off_t1 = np.stack([traj.offline_actions[t + 1] for traj, t in pairs])
    batch = RLBatch(
        state=np.concatenate([s, off_t, z_t], axis=1),
        action=np.stack([traj.actions[t] for traj, t in pairs]),
        reward=np.asarray([traj.rewards[t] for traj, t in pairs], np.float32),
        next_state=np.concatenate([s1, off_t1, z_t1], axis=1),
        done=np.asarray([traj.terminal and t == len(traj) - 1 for traj, t in pairs],
                        np.float32),
        offline_action=off_t,
        next_offline_action=off_t1,
    )
    return batch, ""


def residual_update(agent: SACAgent, batch: RLBatch, alpha: float,
                    rng: np.random.Generator) -> dict[str, float]:
    """One SAC update where actor and target actions pass through the mix."""
    alpha = _check_alpha(alpha)
    return agent.update(
        {"state": batch.state, "action": batch.action, "reward": batch.reward,
         "next_state": batch.next_state, "done": batch.done},
        rng,
        action_transform=lambda a: compose_var(a, batch.offline_action, alpha),
        next_action_transform=lambda a: compose_var(a, batch.next_offline_action, alpha),
    )
