"""Experiment orchestration: fine-tuning, evaluation, sweeps, baselines.

The fine-tune loop interleaves acting and learning exactly as the method
prescribes: every environment step triggers one encoder update and one SAC
update, episodes enter the replay buffer only once they finish, and the
first `history` steps of each episode are executed by the frozen offline
policy alone.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig
from .config import echo_config
from .context import ContextConfig, ContextModel
from .data import TrajectoryBuffer
from .envs import EnvParams, make_env, normalized_score, read_reference_returns
from .metrics import MetricsWriter, read_metrics, truncate_after
from .offline import (OfflinePolicy, RANDOM_WARMUP_STEPS, load_offline_policy,
                      rollout_return)
from .residual import residual_update, run_episode, sample_rl_batch
from .sac import FlatReplay, SACAgent, SACConfig
from .seeding import stream

__all__ = [
    "AgentBundle", "build_bundle", "save_bundle", "load_bundle",
    "latest_checkpoint", "finetune", "evaluate", "evaluate_policy", "sweep",
    "default_grid", "write_sweep_csv", "baseline_run", "report",
]


# ---------------------------------------------------------------------------
# bundle: everything needed to act, in one checkpoint


@dataclass
class AgentBundle:
    offline: OfflinePolicy
    context: ContextModel
    agent: SACAgent
    offline_weight: float
    env_name: str
    step: int = 0

    def state_entries(self) -> dict[str, np.ndarray]:
        ent: dict[str, np.ndarray] = {}
        for prefix, store in self.agent.stores().items():
            for k, v in store.state_entries().items():
                ent[prefix + k] = v
        for k, v in self.context.state_entries().items():
            ent["context." + k] = v
        for k, v in self.offline.store.state_entries(False).items():
            ent["offline." + k] = v
        ent["offline.meta.dims"] = np.array(
            [self.offline.dim_s, self.offline.dim_a] + self.offline.hidden, np.float32)
        ent["bundle.offline_weight"] = np.float32(self.offline_weight)
        ent["bundle.step"] = np.float32(self.step)
        return ent

    def load_state_entries(self, ent: dict[str, np.ndarray]) -> None:
        for prefix, store in self.agent.stores().items():
            sub = {k[len(prefix):]: v for k, v in ent.items() if k.startswith(prefix)}
            store.load_state_entries(sub)
        self.context.load_state_entries(
            {k[len("context."):]: v for k, v in ent.items() if k.startswith("context.")})
        self.offline = _offline_from_entries(ent)
        self.offline_weight = float(ent["bundle.offline_weight"])
        self.step = int(ent["bundle.step"])


def _offline_from_entries(ent: dict[str, np.ndarray]) -> OfflinePolicy:
    off = nn.ParamStore()
    for k, v in ent.items():
        if k.startswith("offline.") and k != "offline.meta.dims":
            off.add(k[len("offline."):], v.copy())
    meta = ent["offline.meta.dims"].astype(int)
    return OfflinePolicy(off, int(meta[0]), int(meta[1]), list(meta[2:])).freeze()


def _context_config(cfg: RunConfig, dim_s: int, dim_a: int) -> ContextConfig:
    return ContextConfig(
        dim_s=dim_s, dim_a=dim_a, latent=cfg.latent, window=cfg.history,
        rollout=cfg.rollout, groups=cfg.groups,
        consistency_weight=cfg.consistency_weight, gamma=cfg.gamma,
        channels=cfg.channels, lr=cfg.encoder_lr)


def _residual_sac_config(cfg: RunConfig, dim_s: int, dim_a: int) -> SACConfig:
    return SACConfig(
        dim_in=dim_s + dim_a + cfg.latent, dim_a=dim_a, hidden=list(cfg.hidden),
        gamma=cfg.gamma, tau=cfg.tau, actor_lr=cfg.actor_lr,
        critic_lr=cfg.critic_lr, temperature_lr=cfg.temperature_lr,
        init_temperature=cfg.init_temperature, batch_size=cfg.batch_size,
        actor_final_scale=cfg.actor_final_scale, log_std_bias=cfg.log_std_bias)


def build_bundle(cfg: RunConfig) -> AgentBundle:
    """Fresh encoder and residual agent around the frozen offline policy."""
    env = make_env(cfg.env, cfg.horizon, cfg.dt)
    if not cfg.offline_policy:
        raise ValueError("run.offline_policy is required")
    offline = load_offline_policy(cfg.offline_policy)
    if (offline.dim_s, offline.dim_a) != (env.dim_s, env.dim_a):
        raise ValueError(
            f"offline policy dims ({offline.dim_s},{offline.dim_a}) do not "
            f"match env {cfg.env} ({env.dim_s},{env.dim_a})")
    context = ContextModel(_context_config(cfg, env.dim_s, env.dim_a),
                           stream(cfg.seed, "init:context"))
    agent = SACAgent(_residual_sac_config(cfg, env.dim_s, env.dim_a),
                     stream(cfg.seed, "init:residual"))
    return AgentBundle(offline, context, agent, cfg.offline_weight, cfg.env)


def save_bundle(path, bundle: AgentBundle) -> None:
    nn.write_entries(path, bundle.state_entries())


def load_bundle(path, cfg: RunConfig) -> AgentBundle:
    """Rebuild from a checkpoint alone; cfg supplies shapes, the file the weights.

    The checkpoint embeds the offline policy, so run.offline_policy need not
    point anywhere, and the stored blend weight wins over the config's.
    """
    ent = nn.read_entries(path)
    env = make_env(cfg.env, cfg.horizon, cfg.dt)
    offline = _offline_from_entries(ent)
    if (offline.dim_s, offline.dim_a) != (env.dim_s, env.dim_a):
        raise ValueError(f"checkpoint dims do not match env {cfg.env}")
    context = ContextModel(_context_config(cfg, env.dim_s, env.dim_a),
                           stream(cfg.seed, "init:context"))
    agent = SACAgent(_residual_sac_config(cfg, env.dim_s, env.dim_a),
                     stream(cfg.seed, "init:residual"))
    bundle = AgentBundle(offline, context, agent, cfg.offline_weight, cfg.env)
    bundle.load_state_entries(ent)
    return bundle


_CKPT_RE = re.compile(r"step_(\d+)\.ckpt$")


def latest_checkpoint(ckpt_dir) -> tuple[int, Path] | None:
    best: tuple[int, Path] | None = None
    for p in Path(ckpt_dir).glob("step_*.ckpt"):
        m = _CKPT_RE.search(p.name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), p)
    return best


# ---------------------------------------------------------------------------
# statistics helpers


def _stats(values, prefix: str = "") -> dict[str, float]:
    x = np.asarray(values, np.float64)
    q25, q75 = np.percentile(x, [25.0, 75.0])
    return {
        prefix + "mean": float(x.mean()),
        prefix + "std": float(x.std()),
        prefix + "median": float(np.median(x)),
        prefix + "iqr": float(q75 - q25),
        prefix + "min": float(x.min()),
        prefix + "max": float(x.max()),
    }


def _return_stats(env_name: str, returns, refs, prefix: str = "") -> dict:
    out = _stats(returns, prefix)
    if refs is not None and env_name in refs:
        normed = [normalized_score(env_name, r, refs) for r in returns]
        out.update(_stats(normed, prefix + "norm_"))
    return out


def _load_refs(cfg: RunConfig):
    return read_reference_returns(cfg.references) if cfg.references else None


# ---------------------------------------------------------------------------
# fine-tuning (the method's online loop)


def _assert_warmup_exact(ep, offline: OfflinePolicy, h: int) -> None:
    # recomputation stays on the single-state path, so equality is bitwise
    for i in range(min(h, len(ep.actions))):
        if not np.array_equal(ep.actions[i], offline.act(ep.states[i])):
            raise RuntimeError(f"warmup action at t={i} deviates from the offline policy")


def finetune(cfg: RunConfig, out_dir, *, resume: bool = False,
             progress=None) -> dict:
    """Adaptive fine-tuning; returns a summary dict.

    Resume reloads the newest checkpoint and keeps training from its step
    with the metrics stream rewound to match.  The replay buffer and rng
    streams restart, so a resumed run is deterministic in its own right but
    not byte-identical to the uninterrupted one.
    """
    cfg.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    env = make_env(cfg.env, cfg.horizon, cfg.dt)
    bundle = build_bundle(cfg)
    refs = _load_refs(cfg)

    metrics_path = out / "metrics.jsonl"
    start_step = 0
    if resume:
        latest = latest_checkpoint(ckpt_dir)
        if latest is not None:
            bundle = load_bundle(latest[1], cfg)
            start_step = bundle.step
            if metrics_path.exists():
                truncate_after(metrics_path, start_step)
    (out / "config.echo").write_text(echo_config(cfg))

    offline_hash = bundle.offline.param_hash()

    def check_offline():
        if bundle.offline.param_hash() != offline_hash:
            raise RuntimeError("offline policy parameters changed during fine-tuning")

    env_rng = stream(cfg.seed, "env")
    agent_rng = stream(cfg.seed, "agent")
    train_rng = stream(cfg.seed, "train")
    buffer = TrajectoryBuffer()

    def run_eval(at_step: int) -> dict:
        ev_env = make_env(cfg.env, cfg.horizon, cfg.dt)
        ev_rng = stream(cfg.seed, "eval", at_step)
        rets = [run_episode(ev_env, bundle.offline, bundle.context, bundle.agent,
                            bundle.offline_weight, ev_rng,
                            deterministic=True).episode_return
                for _ in range(cfg.eval_episodes)]
        row = _return_stats(cfg.env, rets, refs, "eval_return_")
        row["eval_episodes"] = cfg.eval_episodes
        return row

    step = start_step
    episodes = 0
    last_ckpt: Path | None = None

    with MetricsWriter(metrics_path, resume=resume and start_step > 0) as writer:
        if start_step == 0:
            writer.log(0, **run_eval(0))

        while step < cfg.total_steps:
            acc: dict[str, list[float]] = {}

            def note(key: str, value: float) -> None:
                acc.setdefault(key, []).append(float(value))

            def on_step():
                nonlocal step, last_ckpt
                step += 1
                parts, _skip = bundle.context.train_step(buffer, train_rng)
                if parts is not None:
                    note("encoder_loss", parts["loss_total"])
                    note("encoder_consistency", parts["loss_consistency"])
                batch, _reason = sample_rl_batch(buffer, train_rng,
                                                 cfg.batch_size, bundle.context)
                if batch is not None:
                    losses = residual_update(bundle.agent, batch,
                                             bundle.offline_weight, train_rng)
                    note("critic_loss", losses["critic_loss"])
                    note("actor_loss", losses["actor_loss"])
                if step <= cfg.total_steps and step % cfg.eval_interval == 0:
                    writer.log(step, **run_eval(step))
                    if progress is not None:
                        progress(step, "eval")
                if step <= cfg.total_steps and (
                        step % cfg.checkpoint_interval == 0 or step == cfg.total_steps):
                    bundle.step = step
                    last_ckpt = ckpt_dir / f"step_{step}.ckpt"
                    save_bundle(last_ckpt, bundle)
                    check_offline()

            ep = run_episode(env, bundle.offline, bundle.context, bundle.agent,
                             bundle.offline_weight, env_rng, agent_rng,
                             on_step=on_step)
            episodes += 1
            _assert_warmup_exact(ep, bundle.offline, cfg.history)
            ep.add_to(buffer)
            bundle.context.maybe_fit_normalizer(buffer)
            check_offline()

            row = {
                "episode_return": ep.episode_return,
                "episode_length": len(ep.actions),
                "mean_abs_residual_action": ep.mean_abs_residual,
                "temperature": bundle.agent.alpha,
            }
            for key, vals in acc.items():
                row[key] = float(np.mean(vals))
            writer.log(step, **row)

    return {
        "steps": step,
        "episodes": episodes,
        "metrics": str(metrics_path),
        "checkpoint": str(last_ckpt) if last_ckpt is not None else "",
    }


# ---------------------------------------------------------------------------
# evaluation


def evaluate(bundle: AgentBundle, episodes: int, seed: int, *,
             horizon: int = 200, dt: float = 0.05,
             override: EnvParams | None = None, refs=None) -> dict:
    """Deterministic-mode return statistics over fresh episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = make_env(bundle.env_name, horizon, dt)
    rng = stream(seed, "eval")
    rets = [run_episode(env, bundle.offline, bundle.context, bundle.agent,
                        bundle.offline_weight, rng, deterministic=True,
                        override=override).episode_return
            for _ in range(episodes)]
    out = _return_stats(bundle.env_name, rets, refs)
    out["episodes"] = episodes
    if refs is None or bundle.env_name not in refs:
        out["note"] = f"no reference returns for {bundle.env_name}; raw scores only"
    return out


def evaluate_policy(env_name: str, act, episodes: int, seed: int, *,
                    horizon: int = 200, dt: float = 0.05,
                    override: EnvParams | None = None, refs=None) -> dict:
    """Same statistics for a bare act(observation) policy."""
    env = make_env(env_name, horizon, dt)
    rng = stream(seed, "eval")
    rets = [rollout_return(env, act, rng, override) for _ in range(episodes)]
    out = _return_stats(env_name, rets, refs)
    out["episodes"] = episodes
    return out


# ---------------------------------------------------------------------------
# parameter sweeps


_PARAM_FIELD = {
    "mass": "mass_scale",
    "damping": "damping_scale",
    "friction": "friction_scale",
    "length": "length_scale",
}


def default_grid(param: str) -> list[float]:
    if param in ("mass", "damping"):
        return [round(0.5 + 0.1 * i, 10) for i in range(11)]
    if param in ("friction", "length"):
        return [round(0.75 + 0.05 * i, 10) for i in range(11)]
    raise ValueError(f"unknown sweep parameter {param!r}")


def sweep(bundle: AgentBundle | None, param: str, values, episodes: int,
          seed: int, *, horizon: int = 200, dt: float = 0.05, refs=None,
          act=None, env_name: str | None = None) -> list[dict]:
    """Fix one dynamics parameter per value (others nominal) and evaluate.

    act replaces the bundle with a bare act(observation) callable (plus an
    explicit env_name), which is how the frozen-offline baseline rides the
    same grid.
    """
    if param not in _PARAM_FIELD:
        raise ValueError(f"unknown sweep parameter {param!r}")
    if act is None and bundle is None:
        raise ValueError("sweep needs a bundle or an act callable")
    name = env_name or (bundle.env_name if bundle is not None else None)
    if name is None:
        raise ValueError("sweep with act= needs env_name")
    values = [float(v) for v in values]
    if any(v <= 0 for v in values):
        raise ValueError("scale values must be positive")
    if param in ("mass", "damping"):
        support = make_env(name, horizon, dt).scales.support
    else:
        support = (1.0,)  # training never varies friction or length
    rows = []
    for v in values:
        override = EnvParams(**{_PARAM_FIELD[param]: v})
        if act is None:
            st = evaluate(bundle, episodes, seed, horizon=horizon, dt=dt,
                          override=override, refs=refs)
        else:
            st = evaluate_policy(name, act, episodes, seed, horizon=horizon,
                                 dt=dt, override=override, refs=refs)
        st.pop("note", None)
        rows.append({"parameter": param, "scale": v,
                     "in_distribution": bool(min(support) <= v <= max(support)),
                     **st})
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no sweep rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# baselines


def baseline_run(kind: str, cfg: RunConfig, out_dir) -> dict:
    if kind == "frozen-offline":
        return _baseline_frozen(cfg, out_dir)
    if kind == "sac-scratch":
        return _baseline_scratch(cfg, out_dir)
    raise ValueError(f"unknown baseline kind {kind!r}")


def _baseline_frozen(cfg: RunConfig, out_dir) -> dict:
    """The offline policy alone under the training MDP distribution."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(cfg))
    offline = load_offline_policy(cfg.offline_policy)
    refs = _load_refs(cfg)
    env = make_env(cfg.env, cfg.horizon, cfg.dt)
    rng = stream(cfg.seed, "eval", 0)
    rets = [rollout_return(env, lambda o: offline.act(o), rng)
            for _ in range(cfg.eval_episodes)]
    row = _return_stats(cfg.env, rets, refs, "eval_return_")
    row["eval_episodes"] = cfg.eval_episodes
    with MetricsWriter(out / "metrics.jsonl") as writer:
        writer.log(0, **row)
    return {"steps": 0, "episodes": cfg.eval_episodes,
            "metrics": str(out / "metrics.jsonl"), "checkpoint": ""}


def _baseline_scratch(cfg: RunConfig, out_dir) -> dict:
    """Plain SAC trained online on raw observations, no offline policy."""
    cfg.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(cfg))
    refs = _load_refs(cfg)

    env = make_env(cfg.env, cfg.horizon, cfg.dt)
    sac_cfg = SACConfig(
        dim_in=env.dim_s, dim_a=env.dim_a, hidden=list(cfg.hidden),
        gamma=cfg.gamma, tau=cfg.tau, actor_lr=cfg.actor_lr,
        critic_lr=cfg.critic_lr, temperature_lr=cfg.temperature_lr,
        init_temperature=cfg.init_temperature, batch_size=cfg.batch_size)
    agent = SACAgent(sac_cfg, stream(cfg.seed, "init:scratch"))
    replay = FlatReplay(capacity=max(cfg.total_steps, 1),
                        dim_s=env.dim_s, dim_a=env.dim_a)

    env_rng = stream(cfg.seed, "env")
    agent_rng = stream(cfg.seed, "agent")
    train_rng = stream(cfg.seed, "train")

    def run_eval(at_step: int) -> dict:
        st = evaluate_policy(cfg.env, lambda o: agent.act(o, deterministic=True),
                             cfg.eval_episodes, cfg.seed, horizon=cfg.horizon,
                             dt=cfg.dt, refs=refs)
        st.pop("episodes", None)
        row = {"eval_return_" + k: v for k, v in st.items()}
        row["eval_episodes"] = cfg.eval_episodes
        return row

    step = 0
    episodes = 0
    last_ckpt = ""
    with MetricsWriter(out / "metrics.jsonl") as writer:
        writer.log(0, **run_eval(0))
        state = env.reset(env_rng)
        ep_return = 0.0
        ep_len = 0
        acc: dict[str, list[float]] = {}
        while step < cfg.total_steps:
            obs = state.observation.astype(np.float32)
            if step < RANDOM_WARMUP_STEPS:
                action = agent_rng.uniform(-1.0, 1.0, env.dim_a)
            else:
                action = agent.act(obs, deterministic=False, rng=agent_rng)
            state, reward, done = env.step(action)
            replay.add(obs, action, reward, state.observation, env.terminated_by_failure)
            ep_return += reward
            ep_len += 1
            step += 1
            if step > RANDOM_WARMUP_STEPS:
                losses = agent.update(replay.sample(train_rng, sac_cfg.batch_size),
                                      train_rng)
                acc.setdefault("critic_loss", []).append(losses["critic_loss"])
                acc.setdefault("actor_loss", []).append(losses["actor_loss"])
            if step % cfg.eval_interval == 0:
                writer.log(step, **run_eval(step))
            if step % cfg.checkpoint_interval == 0 or step == cfg.total_steps:
                last_ckpt = ckpt_dir / f"step_{step}.ckpt"
                nn.save_stores(last_ckpt, agent.stores())
            if done:
                episodes += 1
                row = {"episode_return": ep_return, "episode_length": ep_len,
                       "temperature": agent.alpha}
                for key, vals in acc.items():
                    row[key] = float(np.mean(vals))
                writer.log(step, **row)
                state = env.reset(env_rng)
                ep_return, ep_len, acc = 0.0, 0, {}

    return {"steps": step, "episodes": episodes,
            "metrics": str(out / "metrics.jsonl"), "checkpoint": str(last_ckpt)}


# ---------------------------------------------------------------------------
# report aggregation


def report(stream_paths, out_csv=None) -> tuple[list[dict], list[str]]:
    """Align metric streams on step and emit mean/std columns per metric.

    Returns (rows, notes); notes record omitted columns and grid resampling.
    """
    paths = [Path(p) for p in stream_paths]
    if not paths:
        raise ValueError("report needs at least one metrics stream")
    streams = [read_metrics(p) for p in paths]

    keys: list[str] = []
    for rows in streams:
        for r in rows:
            for k, v in r.items():
                if k != "step" and isinstance(v, (int, float)) \
                        and not isinstance(v, bool) and k not in keys:
                    keys.append(k)

    notes: list[str] = []
    table: dict[int, dict[str, float]] = {}
    for key in sorted(keys):
        maps = []
        for rows in streams:
            m = {r["step"]: r[key] for r in rows
                 if key in r and isinstance(r[key], (int, float))
                 and not isinstance(r[key], bool)}
            maps.append(m)
        if any(not m for m in maps):
            absent = sum(1 for m in maps if not m)
            notes.append(f"{key}: omitted (missing from {absent} stream(s))")
            continue
        grids = [set(m) for m in maps]
        common = sorted(set.intersection(*grids))
        if not common:
            notes.append(f"{key}: omitted (streams share no common steps)")
            continue
        if any(g != grids[0] for g in grids[1:]):
            notes.append(f"{key}: resampled to the coarsest common step grid "
                         f"({len(common)} points)")
        for s in common:
            vals = np.array([m[s] for m in maps], np.float64)
            cell = table.setdefault(s, {})
            cell[key + "_mean"] = float(vals.mean())
            cell[key + "_std"] = float(vals.std())

    cols = ["step"] + sorted({c for cell in table.values() for c in cell})
    rows_out = [{"step": s, **table[s]} for s in sorted(table)]
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, restval="")
            w.writeheader()
            for r in rows_out:
                w.writerow(r)
    return rows_out, notes
