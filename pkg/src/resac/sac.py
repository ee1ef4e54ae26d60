"""Soft actor-critic over a generic input vector.

The same agent class serves three roles: the online collector that
produces offline datasets, the sac-scratch baseline, and the residual
agent (whose input is the augmented state assembled elsewhere).  Twin
critics with EMA targets, tanh-Gaussian actor, learnable temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn

__all__ = ["SACConfig", "SACAgent", "FlatReplay"]


@dataclass
class SACConfig:
    dim_in: int
    dim_a: int
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    temperature_lr: float = 3e-4
    init_temperature: float = 0.2
    target_entropy: float | None = None  # default -dim_a
    batch_size: int = 256
    # residual agents start nearly silent: tiny mean head, tight initial std
    actor_final_scale: float = 1.0
    log_std_bias: float = 0.0

    def resolved_target_entropy(self) -> float:
        return -float(self.dim_a) if self.target_entropy is None else self.target_entropy


class SACAgent:
    def __init__(self, cfg: SACConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.actor = nn.ParamStore()
        nn.init_policy(self.actor, "pi", cfg.dim_in, cfg.dim_a, cfg.hidden, rng)
        if cfg.actor_final_scale != 1.0:
            for head in ("mean_w", "mean_b", "logstd_w", "logstd_b"):
                self.actor[f"pi.{head}"] = self.actor[f"pi.{head}"] * cfg.actor_final_scale
        if cfg.log_std_bias != 0.0:
            self.actor["pi.logstd_b"] = self.actor["pi.logstd_b"] + np.float32(cfg.log_std_bias)

        qdims = [cfg.dim_in + cfg.dim_a] + cfg.hidden + [1]
        self.critic1 = nn.ParamStore()
        nn.init_mlp(self.critic1, "q", qdims, rng)
        self.critic2 = nn.ParamStore()
        nn.init_mlp(self.critic2, "q", qdims, rng)
        self.target1 = self.critic1.clone_params()
        self.target2 = self.critic2.clone_params()

        self.temperature = nn.ParamStore()
        self.temperature.add("log_alpha", np.float32(np.log(cfg.init_temperature)))

        self._n_q_layers = len(qdims) - 1
        self._n_pi_layers = len(cfg.hidden)

    # ------------------------------------------------------------------

    @property
    def alpha(self) -> float:
        return float(np.exp(self.temperature["log_alpha"]))

    def stores(self) -> dict[str, nn.ParamStore]:
        return {
            "actor.": self.actor,
            "critic1.": self.critic1,
            "critic2.": self.critic2,
            "target1.": self.target1,
            "target2.": self.target2,
            "temperature.": self.temperature,
        }

    def _policy(self, bound, x: ad.Var):
        return nn.policy_heads(bound, "pi", x, self._n_pi_layers)

    def _q(self, bound, s: ad.Var, a: ad.Var) -> ad.Var:
        return nn.apply_mlp(bound, "q", ad.concat([s, a], axis=1), self._n_q_layers)

    def act(self, state: np.ndarray, deterministic: bool,
            rng: np.random.Generator | None = None) -> np.ndarray:
        """Action for one state (dim_in,) or a batch (B, dim_in)."""
        x = np.asarray(state, dtype=np.float32)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[1] != self.cfg.dim_in:
            raise ValueError(f"state dim {x.shape[1]} != expected {self.cfg.dim_in}")
        with ad.tape():
            mean, log_std = self._policy(self.actor.bind(trainable=False), ad.constant(x))
            if deterministic:
                a = np.tanh(mean.value)
            else:
                if rng is None:
                    raise ValueError("stochastic act needs an rng")
                noise = rng.standard_normal(mean.value.shape)
                a, _ = nn.squashed_gaussian_sample(mean, log_std, noise)
                a = a.value
        return a[0] if single else a

    # ------------------------------------------------------------------

    def update(self, batch: dict[str, np.ndarray], rng: np.random.Generator,
               action_transform=None, next_action_transform=None) -> dict[str, float]:
        """One critic step, one actor step, one temperature step, one EMA.

        The optional transforms rewrite freshly sampled actions inside the
        actor and target graphs (residual mixing); critic training always
        uses the stored executed action.  Entropy terms stay on the
        untransformed policy sample.
        """
        cfg = self.cfg
        s = np.asarray(batch["state"], np.float32)
        a = np.asarray(batch["action"], np.float32)
        r = np.asarray(batch["reward"], np.float32).reshape(-1, 1)
        s2 = np.asarray(batch["next_state"], np.float32)
        done = np.asarray(batch["done"], np.float32).reshape(-1, 1)
        if s.shape[1] != cfg.dim_in or s2.shape[1] != cfg.dim_in or a.shape[1] != cfg.dim_a:
            raise ValueError("minibatch dimensions do not match the agent")
        b = s.shape[0]
        noise_next = rng.standard_normal((b, cfg.dim_a))
        noise_new = rng.standard_normal((b, cfg.dim_a))
        alpha = self.alpha

        # soft Bellman target, no gradients anywhere
        with ad.tape():
            mean2, log_std2 = self._policy(self.actor.bind(trainable=False), ad.constant(s2))
            a2, logp2 = nn.squashed_gaussian_sample(mean2, log_std2, noise_next)
            if next_action_transform is not None:
                a2 = next_action_transform(a2)
            q1t = self._q(self.target1.bind(trainable=False), ad.constant(s2), a2)
            q2t = self._q(self.target2.bind(trainable=False), ad.constant(s2), a2)
        qmin = np.minimum(q1t.value, q2t.value)
        y = r + cfg.gamma * (1.0 - done) * (qmin - alpha * logp2.value)

        with ad.tape():
            b1, b2 = self.critic1.bind(), self.critic2.bind()
            q1 = self._q(b1, ad.constant(s), ad.constant(a))
            q2 = self._q(b2, ad.constant(s), ad.constant(a))
            critic_loss = ad.add(
                ad.reduce_mean(ad.square(ad.sub(q1, ad.constant(y)))),
                ad.reduce_mean(ad.square(ad.sub(q2, ad.constant(y)))))
            ad.backward(critic_loss)
            self.critic1.adam_step(b1, cfg.critic_lr)
            self.critic2.adam_step(b2, cfg.critic_lr)

        # actor step; critic parameters enter as constants
        with ad.tape():
            ab = self.actor.bind()
            mean, log_std = self._policy(ab, ad.constant(s))
            a_new, logp = nn.squashed_gaussian_sample(mean, log_std, noise_new)
            if action_transform is not None:
                a_new = action_transform(a_new)
            q1n = self._q(self.critic1.bind(trainable=False), ad.constant(s), a_new)
            q2n = self._q(self.critic2.bind(trainable=False), ad.constant(s), a_new)
            actor_loss = ad.reduce_mean(ad.sub(ad.mul(logp, alpha), ad.minimum(q1n, q2n)))
            ad.backward(actor_loss)
            self.actor.adam_step(ab, cfg.actor_lr)

        # temperature step on the fresh action's log-density (a constant here)
        ent_gap = logp.value + cfg.resolved_target_entropy()
        with ad.tape():
            tb = self.temperature.bind()
            temp_loss = ad.reduce_mean(ad.mul(tb["log_alpha"], ad.constant(-ent_gap)))
            ad.backward(temp_loss)
            self.temperature.adam_step(tb, cfg.temperature_lr)

        nn.ema_update(self.target1, self.critic1, cfg.tau)
        nn.ema_update(self.target2, self.critic2, cfg.tau)

        return {
            "critic_loss": float(critic_loss.value),
            "actor_loss": float(actor_loss.value),
            "temperature": self.alpha,
            "entropy": float(-logp.value.mean()),
        }


class FlatReplay:
    """Fixed-capacity transition ring for plain SAC (collector, sac-scratch)."""

    def __init__(self, capacity: int, dim_s: int, dim_a: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, dim_s), np.float32)
        self.a = np.zeros((capacity, dim_a), np.float32)
        self.r = np.zeros(capacity, np.float32)
        self.s2 = np.zeros((capacity, dim_s), np.float32)
        self.done = np.zeros(capacity, np.float32)
        self.ptr = 0
        self.full = False

    def __len__(self) -> int:
        return self.capacity if self.full else self.ptr

    def add(self, s, a, r, s2, done: bool) -> None:
        i = self.ptr
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = float(done)
        self.ptr = (i + 1) % self.capacity
        self.full = self.full or self.ptr == 0

    def sample(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        idx = rng.integers(len(self), size=batch)
        return {"state": self.s[idx], "action": self.a[idx], "reward": self.r[idx],
                "next_state": self.s2[idx], "done": self.done[idx]}
