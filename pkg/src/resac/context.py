"""Dynamics context: conv encoder over a trailing transition window plus
a next-state decoder, trained jointly so the latent identifies the
episode's hidden dynamics multipliers.

The encoder sees the last H (state, action) pairs as channels over time.
The decoder predicts the z-scored next state from (state, action, z);
its k-step loss feeds predictions back autoregressively (recorded
actions, denormalized states) so the latent must carry whatever the
dynamics change across episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .data import TrajectoryBuffer

__all__ = ["ContextConfig", "EncoderBatch", "Normalizer", "ContextModel",
           "sample_encoder_batch"]


@dataclass
class ContextConfig:
    dim_s: int
    dim_a: int
    latent: int = 8
    window: int = 10          # H
    rollout: int = 5          # K
    groups: int = 4           # N windows per batch, all one trajectory
    consistency_weight: float = 0.1
    gamma: float = 0.99
    channels: int = 32
    decoder_hidden: list[int] = field(default_factory=lambda: [256, 256])
    lr: float = 1e-4
    normalizer_trajectories: int = 10

    @property
    def in_channels(self) -> int:
        return self.dim_s + self.dim_a

    def min_trajectory_len(self) -> int:
        # window start t needs H prior steps and K following states
        return self.window + self.rollout


@dataclass
class EncoderBatch:
    windows: np.ndarray          # (n, dim_s+dim_a, H) f32
    rollout_states: np.ndarray   # (n, K+1, dim_s) f32: s_t .. s_{t+K}
    rollout_actions: np.ndarray  # (n, K, dim_a) f32: a_t .. a_{t+K-1}
    extra_state: np.ndarray      # (n, dim_s) f32
    extra_action: np.ndarray     # (n, dim_a) f32
    extra_next: np.ndarray       # (n, dim_s) f32
    trajectory_uid: int = -1

    @property
    def n(self) -> int:
        return len(self.windows)


def sample_encoder_batch(buffer: TrajectoryBuffer, rng: np.random.Generator,
                         cfg: ContextConfig) -> EncoderBatch:
    """N window groups from one uniformly chosen eligible trajectory."""
    h, k = cfg.window, cfg.rollout
    eligible = buffer.eligible(cfg.min_trajectory_len())
    if not eligible:
        raise ValueError(f"no trajectory of length >= {cfg.min_trajectory_len()} in buffer")
    traj = eligible[rng.integers(len(eligible))]
    t_len = len(traj)
    starts_lo, starts_hi = h, t_len - k  # inclusive range of window starts
    available = starts_hi - starts_lo + 1
    n = min(cfg.groups, available)
    starts = starts_lo + rng.choice(available, size=n, replace=False)
    extras = rng.integers(t_len, size=n)

    windows = np.stack([buffer.window_channels(traj, int(t), h) for t in starts])
    roll_s = np.stack([traj.states[t:t + k + 1] for t in starts])
    roll_a = np.stack([traj.actions[t:t + k] for t in starts])
    return EncoderBatch(
        windows=windows.astype(np.float32),
        rollout_states=roll_s, rollout_actions=roll_a,
        extra_state=traj.states[extras],
        extra_action=traj.actions[extras],
        extra_next=traj.states[extras + 1],
        trajectory_uid=traj.uid,
    )


class Normalizer:
    """Per-dimension z-scoring, fit once and then frozen."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim, np.float32)
        self.std = np.ones(dim, np.float32)
        self.frozen = False

    def fit(self, samples: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("normalizer is frozen")
        self.mean = samples.mean(axis=0).astype(np.float32)
        self.std = np.maximum(samples.std(axis=0), 1e-6).astype(np.float32)
        self.frozen = True

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def inverse_var(self, x: ad.Var) -> ad.Var:
        return ad.add(ad.mul(x, ad.constant(self.std)), ad.constant(self.mean))

    def state_entries(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.mean, "norm.std": self.std,
                "norm.frozen": np.float32(self.frozen)}

    def load_state_entries(self, ent: dict[str, np.ndarray]) -> None:
        self.mean = ent["norm.mean"].copy()
        self.std = ent["norm.std"].copy()
        self.frozen = bool(ent["norm.frozen"])


class ContextModel:
    """Conv window encoder + MLP next-state decoder, trained jointly."""

    CONV_WIDTHS = (4, 2, 1)

    def __init__(self, cfg: ContextConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.store = nn.ParamStore()
        self.normalizer = Normalizer(cfg.dim_s)
        c_in = cfg.in_channels
        t = cfg.window
        for i, w in enumerate(self.CONV_WIDTHS):
            self.store.add(f"enc.k{i}", nn.uniform_fan_in(rng, (cfg.channels, c_in, w)))
            c_in = cfg.channels
            t = t - w + 1
        self._flat = cfg.channels * t
        self.store.add("enc.w", nn.uniform_fan_in(rng, (self._flat, cfg.latent)))
        self.store.add("enc.b", nn.uniform_fan_in(rng, (cfg.latent,), fan_in=self._flat))
        dims = [cfg.dim_s + cfg.dim_a + cfg.latent] + cfg.decoder_hidden + [cfg.dim_s]
        nn.init_mlp(self.store, "dec", dims, rng)
        self._n_dec_layers = len(dims) - 1

    # ------------------------------------------------------------------
    # graph builders

    def encode_var(self, bound, windows: ad.Var) -> ad.Var:
        v = np.shape(windows.value)
        if v[-2:] != (self.cfg.in_channels, self.cfg.window):
            raise ValueError(
                f"window must be (..., {self.cfg.in_channels}, {self.cfg.window}), got {v}")
        x = windows
        for i in range(len(self.CONV_WIDTHS)):
            x = ad.relu(ad.conv1d(x, bound[f"enc.k{i}"]))
        x = ad.reshape(x, (-1, self._flat))
        return ad.affine(x, bound["enc.w"], bound["enc.b"])

    def decode_var(self, bound, state: ad.Var, action: ad.Var, z: ad.Var) -> ad.Var:
        x = ad.concat([state, action, z], axis=1)
        return nn.apply_mlp(bound, "dec", x, self._n_dec_layers)

    # ------------------------------------------------------------------
    # inference paths (no gradients)

    def encode(self, windows: np.ndarray) -> np.ndarray:
        """(B, C, H) or (C, H) window(s) -> latent(s)."""
        w = np.asarray(windows, np.float32)
        single = w.ndim == 2
        if single:
            w = w[None]
        with ad.tape():
            z = self.encode_var(self.store.bind(trainable=False), ad.constant(w))
        return z.value[0] if single else z.value

    def predict_next(self, state: np.ndarray, action: np.ndarray,
                     z: np.ndarray) -> np.ndarray:
        """Denormalized next-state prediction, batched."""
        with ad.tape():
            pred = self.decode_var(self.store.bind(trainable=False),
                                   ad.constant(np.atleast_2d(np.asarray(state, np.float32))),
                                   ad.constant(np.atleast_2d(np.asarray(action, np.float32))),
                                   ad.constant(np.atleast_2d(np.asarray(z, np.float32))))
        return self.normalizer.inverse(pred.value)

    # ------------------------------------------------------------------

    def loss_components(self, batch: EncoderBatch, bound=None, *,
                        encode_fn=None, decode_fn=None):
        """Total Eq.-style objective and its three addends.

        encode_fn/decode_fn overrides exist for identity tests; defaults
        use this model's parameters via `bound`.
        """
        cfg = self.cfg
        if bound is None:
            bound = self.store.bind(trainable=False)
        if encode_fn is None:
            encode_fn = lambda w: self.encode_var(bound, w)
        if decode_fn is None:
            decode_fn = lambda s, a, z: self.decode_var(bound, s, a, z)
        norm = self.normalizer

        z = encode_fn(ad.constant(batch.windows))

        # k-step predictions: feed back denormalized predictions, keep grads
        kstep = ad.constant(np.float32(0.0))
        state = ad.constant(batch.rollout_states[:, 0, :])
        for k in range(cfg.rollout):
            action = ad.constant(batch.rollout_actions[:, k, :])
            pred_norm = decode_fn(state, action, z)
            target = ad.constant(norm.transform(batch.rollout_states[:, k + 1, :]))
            err = ad.reduce_sum(ad.square(ad.sub(pred_norm, target)))
            kstep = ad.add(kstep, ad.mul(err, float(cfg.gamma ** k)))
            state = norm.inverse_var(pred_norm)

        extra_pred = decode_fn(ad.constant(batch.extra_state),
                               ad.constant(batch.extra_action), z)
        extra_target = ad.constant(norm.transform(batch.extra_next))
        extra = ad.reduce_sum(ad.square(ad.sub(extra_pred, extra_target)))

        n = batch.n
        if n > 1:
            # sum_{i != j} cos(z_i, z_j) = |sum_i zhat_i|^2 - sum_i |zhat_i|^2
            norms = ad.sqrt(ad.reduce_sum(ad.square(z), axis=1, keepdims=True))
            zhat = ad.div(z, ad.add(norms, 1e-8))
            pair_sum = ad.sub(ad.reduce_sum(ad.square(ad.reduce_sum(zhat, axis=0))),
                              ad.reduce_sum(ad.square(zhat)))
            consistency = ad.mul(ad.neg(pair_sum), cfg.consistency_weight / (n - 1))
        else:
            consistency = ad.constant(np.float32(0.0))

        total = ad.add(ad.add(kstep, extra), consistency)
        parts = {
            "loss_kstep": float(kstep.value),
            "loss_extra": float(extra.value),
            "loss_consistency": float(consistency.value),
            "loss_total": float(total.value),
        }
        return total, parts

    # ------------------------------------------------------------------

    def maybe_fit_normalizer(self, buffer: TrajectoryBuffer) -> bool:
        """Freeze target scaling on the first `normalizer_trajectories` trajectories."""
        if self.normalizer.frozen:
            return False
        if buffer.n_trajectories < self.cfg.normalizer_trajectories:
            return False
        first = buffer.trajectories[:self.cfg.normalizer_trajectories]
        self.normalizer.fit(np.concatenate([t.states for t in first], axis=0))
        return True

    def train_step(self, buffer: TrajectoryBuffer, rng: np.random.Generator):
        """One joint Adam step; returns (parts dict | None, skip reason)."""
        if not buffer.eligible(self.cfg.min_trajectory_len()):
            return None, "no trajectory long enough for an encoder batch"
        self.maybe_fit_normalizer(buffer)
        batch = sample_encoder_batch(buffer, rng, self.cfg)
        with ad.tape():
            bound = self.store.bind()
            total, parts = self.loss_components(batch, bound)
            if not np.isfinite(parts["loss_total"]):
                return None, "non-finite loss; step skipped"
            ad.backward(total)
            self.store.adam_step(bound, self.cfg.lr)
        return parts, ""

    # ------------------------------------------------------------------

    def open_loop_errors(self, states: np.ndarray, actions: np.ndarray,
                         start: int, steps: int, z: np.ndarray) -> float:
        """Mean per-step L2 error of an autoregressive rollout, raw units."""
        s = states[start]
        total = 0.0
        for k in range(steps):
            s = self.predict_next(s, actions[start + k], z)[0]
            total += float(np.linalg.norm(s - states[start + k + 1]))
        return total / steps

    def state_entries(self, include_optimizer: bool = True) -> dict[str, np.ndarray]:
        ent = {"net." + k: v for k, v in self.store.state_entries(include_optimizer).items()}
        ent.update({"stats." + k: v for k, v in self.normalizer.state_entries().items()})
        return ent

    def load_state_entries(self, ent: dict[str, np.ndarray]) -> None:
        self.store.load_state_entries(
            {k[len("net."):]: v for k, v in ent.items() if k.startswith("net.")})
        self.normalizer.load_state_entries(
            {k[len("stats."):]: v for k, v in ent.items() if k.startswith("stats.")})
