import numpy as np
import pytest

from resac import autodiff as ad
from resac import nn
from resac.context import ContextConfig, ContextModel
from resac.data import TrajectoryBuffer
from resac.envs import make_env
from resac.offline import OfflinePolicy
from resac.residual import (EpisodeHistory, RLBatch, build_residual_state,
                            compose_action, compose_var, residual_update,
                            run_episode, sample_rl_batch)
from resac.sac import SACAgent, SACConfig
from resac.seeding import stream


def offline_for(env, constant_bias=None, seed=0):
    store = nn.ParamStore()
    hidden = [16]
    nn.init_policy(store, "pi", env.dim_s, env.dim_a, hidden, np.random.default_rng(seed))
    if constant_bias is not None:
        for name in store.names():
            store[name] = np.zeros_like(store[name])
        store["pi.mean_b"] = np.full(env.dim_a, constant_bias, np.float32)
    return OfflinePolicy(store, env.dim_s, env.dim_a, hidden).freeze()


def context_for(env, seed=0):
    cfg = ContextConfig(dim_s=env.dim_s, dim_a=env.dim_a, latent=4, channels=4,
                        decoder_hidden=[8])
    return ContextModel(cfg, np.random.default_rng(seed))


def agent_for(env, ctx, seed=0, **kw):
    cfg = SACConfig(dim_in=env.dim_s + env.dim_a + ctx.cfg.latent, dim_a=env.dim_a,
                    hidden=[16, 16], **kw)
    return SACAgent(cfg, np.random.default_rng(seed))


def zero_mean_head(agent):
    agent.actor["pi.mean_w"] = np.zeros_like(agent.actor["pi.mean_w"])
    agent.actor["pi.mean_b"] = np.zeros_like(agent.actor["pi.mean_b"])
    return agent


# ---------------------------------------------------------------------------
# composition


def test_compose_default_alpha_arithmetic():
    out = compose_action(np.array([0.8]), np.array([-0.4]), 0.75)
    assert out == pytest.approx([0.5], abs=1e-7)


def test_compose_boundaries_bitwise():
    off = np.array([0.31, -0.77], np.float32)
    res = np.array([-0.99, 0.12], np.float32)
    top = compose_action(off, res, 1.0)
    assert np.array_equal(top, off)
    top[0] = 0.0
    assert off[0] == np.float32(0.31)  # output is a copy, not a view
    assert np.array_equal(compose_action(off, res, 0.0), res)


def test_compose_alpha_validation():
    a = np.zeros(2, np.float32)
    for bad in (-0.1, 1.0001, float("nan")):
        with pytest.raises(ValueError):
            compose_action(a, a, bad)
        with pytest.raises(ValueError):
            compose_var(ad.constant(a), a, bad)


def test_compose_stays_in_unit_box(rng):
    off = rng.uniform(-1, 1, (64, 3)).astype(np.float32)
    res = rng.uniform(-1, 1, (64, 3)).astype(np.float32)
    for alpha in (0.25, 0.5, 0.75):
        out = compose_action(off, res, alpha)
        assert np.all(out >= -1.0) and np.all(out <= 1.0)


def test_compose_var_matches_numpy(rng):
    off = rng.uniform(-1, 1, (8, 2)).astype(np.float32)
    res = rng.uniform(-1, 1, (8, 2)).astype(np.float32)
    with ad.tape():
        got = compose_var(ad.constant(res), off, 0.3).value
    assert np.array_equal(got, compose_action(off, res, 0.3))


# ---------------------------------------------------------------------------
# history windows


def test_history_window_matches_buffer_layout(rng):
    ds, da, h = 3, 2, 4
    hist = EpisodeHistory(ds, da, rng.normal(size=ds))
    for _ in range(7):
        hist.push(rng.uniform(-1, 1, da), 0.0, rng.normal(size=ds))
    states, actions, rewards = hist.arrays()
    buf = TrajectoryBuffer()
    traj = buf.add(states, actions, rewards, False, np.zeros((8, da)))
    # the window used when acting at step t must equal the training-time one
    assert np.array_equal(hist.window(h), buf.window_channels(traj, 7, h))
    assert hist.window(h).shape == (ds + da, h)


def test_history_window_needs_enough_steps(rng):
    hist = EpisodeHistory(2, 1, rng.normal(size=2))
    hist.push(np.zeros(1), 0.0, rng.normal(size=2))
    with pytest.raises(ValueError):
        hist.window(2)


# ---------------------------------------------------------------------------
# residual state assembly


def test_build_residual_state_layout():
    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    rng = stream(0, "env")
    state = env.reset(rng)
    hist = EpisodeHistory(env.dim_s, env.dim_a, state.observation)
    for _ in range(ctx.cfg.window):
        a = offline.act(hist.states[-1])
        s, r, _ = env.step(a)
        hist.push(a, r, s.observation)
    rs = build_residual_state(hist.states[-1], offline, ctx, hist)
    assert rs.shape == (env.dim_s + env.dim_a + ctx.cfg.latent,)
    assert np.array_equal(rs, build_residual_state(hist.states[-1], offline, ctx, hist))
    assert np.array_equal(rs[:env.dim_s], hist.states[-1])
    assert np.array_equal(rs[env.dim_s:env.dim_s + env.dim_a],
                          offline.act(hist.states[-1]))
    assert np.array_equal(rs[env.dim_s + env.dim_a:],
                          ctx.encode(hist.window(ctx.cfg.window)))


# ---------------------------------------------------------------------------
# episodes


def test_warmup_actions_are_offline_bitwise():
    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    agent = agent_for(env, ctx)
    ep = run_episode(env, offline, ctx, agent, 0.75, stream(3, "env"),
                     deterministic=True)
    h = ctx.cfg.window
    assert len(ep.actions) == 200
    for t in range(h):
        assert np.array_equal(ep.actions[t], offline.act(ep.states[t]))
        assert np.array_equal(ep.actions[t], ep.offline_actions[t])
    for t in range(len(ep.states)):
        assert np.array_equal(ep.offline_actions[t], offline.act(ep.states[t]))
    # after warmup the mixed action deviates from pure offline
    assert not np.array_equal(ep.actions[h:], ep.offline_actions[h:-1])


def test_alpha_one_reproduces_offline_rollout():
    def offline_only():
        env = make_env("msd")
        offline = offline_for(env)
        rng = stream(11, "env")
        s = env.reset(rng)
        states, actions = [np.asarray(s.observation, np.float32)], []
        done = False
        while not done:
            a = offline.act(states[-1])
            s, _, done = env.step(a)
            actions.append(a)
            states.append(np.asarray(s.observation, np.float32))
        return np.stack(states), np.stack(actions)

    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    agent = agent_for(env, ctx)  # live actor with nonzero outputs
    ep = run_episode(env, offline, ctx, agent, 1.0, stream(11, "env"),
                     agent_rng=stream(11, "agent"), deterministic=False)
    ref_states, ref_actions = offline_only()
    assert np.array_equal(ep.states, ref_states)
    assert np.array_equal(ep.actions, ref_actions)


def test_zero_residual_scales_offline_by_alpha():
    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    agent = zero_mean_head(agent_for(env, ctx))
    alpha = 0.6
    ep = run_episode(env, offline, ctx, agent, alpha, stream(5, "env"),
                     deterministic=True)
    h = ctx.cfg.window
    assert ep.mean_abs_residual == 0.0
    want = np.float32(alpha) * ep.offline_actions[h:-1]
    assert np.array_equal(ep.actions[h:], want)
    assert np.array_equal(ep.actions[:h], ep.offline_actions[:h])


def test_episode_on_step_fires_per_transition():
    env = make_env("msd")
    offline = offline_for(env, constant_bias=0.2)
    ctx = context_for(env)
    agent = agent_for(env, ctx)
    seen = []
    run_episode(env, offline, ctx, agent, 0.75, stream(1, "env"),
                deterministic=True, on_step=lambda: seen.append(len(seen)))
    assert len(seen) == 200


def test_failure_episode_is_terminal():
    env = make_env("balance")
    offline = offline_for(env, constant_bias=3.0)  # hard constant push tips the pole
    ctx = context_for(env)
    agent = agent_for(env, ctx)
    ep = run_episode(env, offline, ctx, agent, 1.0, stream(2, "env"),
                     deterministic=True)
    assert ep.terminal
    assert len(ep.actions) < 200
    assert ep.episode_return == pytest.approx(len(ep.actions))
    buf = TrajectoryBuffer()
    traj = ep.add_to(buf)
    assert traj.terminal
    assert np.array_equal(traj.states, ep.states)
    assert np.array_equal(traj.offline_actions, ep.offline_actions)


# ---------------------------------------------------------------------------
# training batches


def labeled_buffer(ds=2, da=1, t_len=20, n_traj=3, terminal=False):
    """states[t, 0] = t and offline_actions[t, 0] = -t expose sampled indices."""
    buf = TrajectoryBuffer()
    for _ in range(n_traj):
        states = np.zeros((t_len + 1, ds), np.float32)
        states[:, 0] = np.arange(t_len + 1)
        actions = np.full((t_len, da), 0.5, np.float32)
        rewards = np.arange(t_len, dtype=np.float32)
        off = np.zeros((t_len + 1, da), np.float32)
        off[:, 0] = -np.arange(t_len + 1)
        buf.add(states, actions, rewards, terminal, off)
    return buf


def test_sample_rl_batch_skips_without_data():
    ctx = ContextModel(ContextConfig(dim_s=2, dim_a=1, latent=4, channels=4,
                                     decoder_hidden=[8]), np.random.default_rng(0))
    batch, reason = sample_rl_batch(TrajectoryBuffer(), np.random.default_rng(0), 8, ctx)
    assert batch is None and reason


def test_sample_rl_batch_layout_and_bounds():
    cfg = ContextConfig(dim_s=2, dim_a=1, latent=4, channels=4, decoder_hidden=[8])
    ctx = ContextModel(cfg, np.random.default_rng(0))
    buf = labeled_buffer(t_len=20)
    batch, reason = sample_rl_batch(buf, np.random.default_rng(1), 128, ctx)
    assert reason == ""
    h = cfg.window
    t = batch.state[:, 0]
    assert np.all(t >= h) and np.all(t <= 19)
    assert np.array_equal(batch.next_state[:, 0], t + 1)
    assert np.array_equal(batch.state[:, 2], -t)            # offline action slot
    assert np.array_equal(batch.offline_action[:, 0], -t)
    assert np.array_equal(batch.next_offline_action[:, 0], -(t + 1))
    assert np.array_equal(batch.reward, t)
    assert np.all(batch.done == 0.0)
    assert batch.state.shape == (128, 2 + 1 + 4)
    assert np.array_equal(batch.action, np.full((128, 1), 0.5, np.float32))


def test_sample_rl_batch_done_only_at_terminal_tail():
    cfg = ContextConfig(dim_s=2, dim_a=1, latent=4, channels=4, decoder_hidden=[8])
    ctx = ContextModel(cfg, np.random.default_rng(0))
    # length h+1 leaves a single sampleable index: the final transition
    term, reason = sample_rl_batch(labeled_buffer(t_len=cfg.window + 1, terminal=True),
                                   np.random.default_rng(2), 16, ctx)
    assert reason == "" and np.all(term.done == 1.0)
    cut, _ = sample_rl_batch(labeled_buffer(t_len=cfg.window + 1, terminal=False),
                             np.random.default_rng(2), 16, ctx)
    assert np.all(cut.done == 0.0)


def test_sample_rl_batch_uses_current_encoder():
    cfg = ContextConfig(dim_s=2, dim_a=1, latent=4, channels=4, decoder_hidden=[8])
    ctx = ContextModel(cfg, np.random.default_rng(0))
    buf = labeled_buffer()
    b1, _ = sample_rl_batch(buf, np.random.default_rng(9), 32, ctx)
    ctx.store["enc.b"] = ctx.store["enc.b"] + 1.0
    b2, _ = sample_rl_batch(buf, np.random.default_rng(9), 32, ctx)
    assert np.array_equal(b1.state[:, :3], b2.state[:, :3])
    assert not np.array_equal(b1.state[:, 3:], b2.state[:, 3:])
    assert not np.array_equal(b1.next_state[:, 3:], b2.next_state[:, 3:])


def test_residual_update_trains(rng):
    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    agent = agent_for(env, ctx, batch_size=32)
    buf = TrajectoryBuffer()
    for seed in range(2):
        run_episode(make_env("msd"), offline, ctx, agent, 0.75,
                    stream(seed, "env"), agent_rng=stream(seed, "agent")).add_to(buf)
    batch, reason = sample_rl_batch(buf, rng, 32, ctx)
    assert reason == ""
    before = agent.actor["pi.mean_w"].copy()
    out = residual_update(agent, batch, 0.75, rng)
    assert np.isfinite(out["critic_loss"]) and np.isfinite(out["actor_loss"])
    assert not np.array_equal(agent.actor["pi.mean_w"], before)


def test_residual_update_alpha_changes_losses(rng):
    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    buf = TrajectoryBuffer()
    run_episode(make_env("msd"), offline, ctx,
                agent_for(env, ctx), 0.75, stream(0, "env"),
                agent_rng=stream(0, "agent")).add_to(buf)
    batch, _ = sample_rl_batch(buf, np.random.default_rng(4), 32, ctx)

    def critic_after(alpha):
        agent = agent_for(env, ctx, batch_size=32)
        return residual_update(agent, batch, alpha, np.random.default_rng(7))["critic_loss"]

    assert critic_after(0.25) != critic_after(0.9)


def test_run_episode_rejects_bad_alpha():
    env = make_env("msd")
    offline = offline_for(env)
    ctx = context_for(env)
    agent = agent_for(env, ctx)
    with pytest.raises(ValueError):
        run_episode(env, offline, ctx, agent, 1.5, stream(0, "env"))
