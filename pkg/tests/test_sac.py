import numpy as np
import pytest

from resac import autodiff as ad
from resac import nn
from resac.gradcheck import check_gradients
from resac.sac import FlatReplay, SACAgent, SACConfig
from resac.seeding import stream


def small_agent(dim_in=3, dim_a=1, hidden=None, seed=0, **kw):
    cfg = SACConfig(dim_in=dim_in, dim_a=dim_a, hidden=hidden or [16, 16], **kw)
    return SACAgent(cfg, stream(seed, "init:test"))


def random_batch(rng, agent, b=32):
    return {
        "state": rng.normal(size=(b, agent.cfg.dim_in)),
        "action": rng.uniform(-1, 1, size=(b, agent.cfg.dim_a)),
        "reward": rng.normal(size=b),
        "next_state": rng.normal(size=(b, agent.cfg.dim_in)),
        "done": rng.integers(0, 2, size=b).astype(float),
    }


class TestAct:
    def test_deterministic_repeatable(self):
        agent = small_agent()
        s = np.array([0.1, -0.5, 2.0])
        a1 = agent.act(s, deterministic=True)
        a2 = agent.act(s, deterministic=True)
        assert np.array_equal(a1, a2)
        assert a1.shape == (1,)

    def test_stochastic_needs_rng(self):
        agent = small_agent()
        with pytest.raises(ValueError, match="rng"):
            agent.act(np.zeros(3), deterministic=False)

    def test_samples_inside_unit_box(self):
        agent = small_agent()
        rng = np.random.default_rng(0)
        a = agent.act(np.zeros((64, 3)), deterministic=False, rng=rng)
        assert a.shape == (64, 1)
        assert np.all(np.abs(a) <= 1.0)

    def test_dim_mismatch_raises(self):
        agent = small_agent()
        with pytest.raises(ValueError, match="dim"):
            agent.act(np.zeros(5), deterministic=True)

    def test_small_final_scale_concentrates_actions(self):
        agent = small_agent(actor_final_scale=1e-2, log_std_bias=-2.0, seed=3)
        rng = np.random.default_rng(1)
        a = agent.act(np.random.default_rng(2).normal(size=(256, 3)),
                      deterministic=False, rng=rng)
        assert np.mean(np.abs(a)) < 0.15


class TestUpdate:
    def test_losses_finite_and_targets_move(self):
        agent = small_agent()
        rng = np.random.default_rng(0)
        t_before = agent.target1["q.w0"].copy()
        losses = agent.update(random_batch(rng, agent), rng)
        assert np.isfinite(losses["critic_loss"])
        assert np.isfinite(losses["actor_loss"])
        assert losses["temperature"] > 0
        assert not np.array_equal(agent.target1["q.w0"], t_before)

    def test_target_is_ema_of_critic(self):
        agent = small_agent()
        rng = np.random.default_rng(0)
        tau = agent.cfg.tau
        t_old = agent.target1["q.w0"].copy()
        agent.update(random_batch(rng, agent), rng)
        want = (1 - tau) * t_old + tau * agent.critic1["q.w0"]
        assert np.allclose(agent.target1["q.w0"], want, atol=1e-7)

    def test_dim_mismatch_raises(self):
        agent = small_agent()
        rng = np.random.default_rng(0)
        batch = random_batch(rng, agent)
        batch["state"] = batch["state"][:, :2]
        with pytest.raises(ValueError, match="dimension"):
            agent.update(batch, rng)

    def test_degenerate_bellman_target(self):
        # zero reward, done everywhere: the target reduces to zero and the
        # critics regress toward it on a fixed batch
        agent = small_agent(seed=5)
        rng = np.random.default_rng(2)
        batch = random_batch(rng, agent, b=64)
        batch["reward"] = np.zeros(64)
        batch["done"] = np.ones(64)
        first, last = None, None
        for i in range(500):
            update_rng = np.random.default_rng(1000 + i)
            losses = agent.update(batch, update_rng)
            if first is None:
                first = losses["critic_loss"]
            last = losses["critic_loss"]
        assert last < 0.1 * first

    def test_bitwise_deterministic_updates(self):
        def run():
            agent = small_agent(seed=9)
            rng = np.random.default_rng(7)
            for _ in range(5):
                agent.update(random_batch(rng, agent), rng)
            return agent.actor["pi.mean_w"].copy(), agent.critic1["q.w0"].copy()

        a1, c1 = run()
        a2, c2 = run()
        assert a1.tobytes() == a2.tobytes()
        assert c1.tobytes() == c2.tobytes()

    def test_critic_gradient_matches_finite_differences(self):
        # tiny critic so the finite-difference sweep stays under 500 entries
        rng = np.random.default_rng(4)
        s = rng.normal(size=(8, 2))
        a = rng.uniform(-1, 1, size=(8, 1))
        y = rng.normal(size=(8, 1))
        store = nn.ParamStore()
        nn.init_mlp(store, "q", [3, 8, 1], stream(0, "init:gradcheck"))

        def build(v):
            x = ad.concat([v["s"], v["a"]], axis=1)
            h = ad.relu(ad.affine(x, v["w0"], v["b0"]))
            q = ad.affine(h, v["w1"], v["b1"])
            return ad.reduce_mean(ad.square(ad.sub(q, v["y"])))

        report = check_gradients(
            lambda v: build({**v, "s": ad.constant(s), "a": ad.constant(a),
                             "y": ad.constant(y)}),
            {"w0": store["q.w0"], "b0": store["q.b0"],
             "w1": store["q.w1"], "b1": store["q.b1"]},
            rel_tol=1e-4,
        )
        assert report.ok, report


class TestFlatReplay:
    def test_len_and_wraparound(self):
        buf = FlatReplay(capacity=10, dim_s=2, dim_a=1)
        for i in range(25):
            buf.add(np.full(2, i), np.zeros(1), float(i), np.zeros(2), False)
        assert len(buf) == 10
        assert buf.full
        # oldest entries were overwritten
        assert buf.r.min() == 15.0

    def test_sample_shapes(self):
        buf = FlatReplay(capacity=100, dim_s=3, dim_a=2)
        rng = np.random.default_rng(0)
        for _ in range(40):
            buf.add(rng.normal(size=3), rng.uniform(-1, 1, 2), 0.5, rng.normal(size=3), False)
        batch = buf.sample(rng, 16)
        assert batch["state"].shape == (16, 3)
        assert batch["action"].shape == (16, 2)
        assert batch["reward"].shape == (16,)


def test_sac_learns_a_toy_bandit():
    # one-step problem: reward = -(a - 0.5)^2, best action 0.5.
    # done everywhere, so the critic learns the reward surface and the
    # actor climbs it; a few thousand updates suffice.
    agent = small_agent(dim_in=1, dim_a=1, hidden=[32, 32],
                        actor_lr=3e-4, critic_lr=1e-3)
    rng = np.random.default_rng(0)
    b = 64
    for _ in range(1500):
        actions = agent.act(np.zeros((b, 1)), deterministic=False, rng=rng)
        batch = {
            "state": np.zeros((b, 1)),
            "action": actions,
            "reward": -((actions[:, 0] - 0.5) ** 2),
            "next_state": np.zeros((b, 1)),
            "done": np.ones(b),
        }
        agent.update(batch, rng)
    a_final = agent.act(np.zeros(1), deterministic=True)
    assert abs(a_final[0] - 0.5) < 0.1
