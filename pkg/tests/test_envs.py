import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resac import envs
from resac.envs import (
    DEFAULT_SUPPORT,
    CartBalance,
    EnvParams,
    MassSpringDamper,
    Pendulum,
    ScaleDistribution,
    env_catalog,
    make_env,
    normalized_score,
    read_reference_returns,
    write_reference_returns,
)

NOMINAL = EnvParams()


class TestEnvParams:
    def test_defaults_are_nominal(self):
        p = EnvParams()
        assert (p.mass_scale, p.damping_scale, p.friction_scale, p.length_scale) == (1, 1, 1, 1)

    @pytest.mark.parametrize("field", ["mass_scale", "damping_scale", "friction_scale", "length_scale"])
    def test_nonpositive_scale_rejected(self, field):
        with pytest.raises(ValueError, match=field):
            EnvParams(**{field: 0.0}).validate()
        with pytest.raises(ValueError, match=field):
            EnvParams(**{field: -1.0}).validate()


class TestReset:
    def test_override_nominal_matches_unscaled(self):
        env = make_env("msd")
        env.reset(np.random.default_rng(0), NOMINAL)
        assert env.params == EnvParams()

    def test_reset_frequencies_near_uniform(self):
        env = make_env("msd")
        rng = np.random.default_rng(123)
        counts = {v: 0 for v in DEFAULT_SUPPORT}
        n = 10_000
        for _ in range(n):
            env.reset(rng)
            counts[env.params.mass_scale] += 1
        freqs = np.array([counts[v] / n for v in DEFAULT_SUPPORT])
        assert np.all(np.abs(freqs - 0.2) < 0.02)
        # chi-square against uniform: 4 dof, 13.28 is the 1% cut
        chi2 = float((n * (freqs - 0.2) ** 2 / 0.2).sum())
        assert chi2 < 13.28

    def test_scales_fixed_between_resets(self):
        env = make_env("balance")
        rng = np.random.default_rng(7)
        s = env.reset(rng)
        before = env.params
        done = False
        while not done:
            s, _, done = env.step(rng.uniform(-1, 1, 1))
            assert env.params == before

    def test_friction_and_length_nominal_without_override(self):
        env = make_env("balance")
        rng = np.random.default_rng(9)
        for _ in range(20):
            env.reset(rng)
            assert env.params.friction_scale == 1.0
            assert env.params.length_scale == 1.0

    def test_ood_override_allowed(self):
        env = make_env("balance")
        env.reset(np.random.default_rng(0), EnvParams(mass_scale=0.5))
        assert env.params.mass_scale == 0.5


class TestStep:
    def test_msd_equilibrium_at_target(self):
        env = make_env("msd")
        env.reset(np.random.default_rng(0), NOMINAL)
        env.set_state(np.zeros(2))
        state, reward, done = env.step(np.zeros(1))
        assert np.allclose(state.internal, 0.0)
        assert reward == 0.0  # the at-target reward
        assert not done

    def test_msd_one_step_hand_integrated(self):
        env = make_env("msd")
        env.reset(np.random.default_rng(0), EnvParams(mass_scale=1.25, damping_scale=0.85))
        env.set_state(np.array([0.3, -0.4]))
        a = 0.5
        state, reward, _ = env.step(np.array([a]))
        # semi-implicit Euler by hand
        m, c, k, umax, dt = 1.25, 0.5 * 0.85, 1.0, 2.0, 0.05
        v = -0.4 + dt * (umax * a - c * -0.4 - k * 0.3) / m
        x = 0.3 + dt * v
        assert np.allclose(state.internal, [x, v], atol=1e-12)
        assert np.isclose(reward, -(x**2) - 0.01 * a**2)

    def test_step_after_done_raises(self):
        env = make_env("msd", horizon=2)
        env.reset(np.random.default_rng(0))
        env.step(np.zeros(1))
        _, _, done = env.step(np.zeros(1))
        assert done
        with pytest.raises(RuntimeError, match="reset"):
            env.step(np.zeros(1))

    def test_horizon_respected(self):
        env = make_env("pendulum")
        env.reset(np.random.default_rng(0))
        steps = 0
        done = False
        while not done:
            state, _, done = env.step(np.zeros(1))
            steps += 1
        assert steps == 200
        assert state.step_index == 200

    def test_action_clipped(self):
        env = make_env("msd")
        env.reset(np.random.default_rng(0), NOMINAL)
        env.set_state(np.zeros(2))
        s_big, _, _ = env.step(np.array([10.0]))
        env.set_state(np.zeros(2))
        s_one, _, _ = env.step(np.array([1.0]))
        assert np.array_equal(s_big.internal, s_one.internal)

    def test_pendulum_dissipates_energy(self):
        env = make_env("pendulum")
        env.reset(np.random.default_rng(0), NOMINAL)
        env.set_state(np.array([np.pi - 0.6, 1.5]))
        start = env.total_energy()
        increases = []
        prev = start
        for _ in range(199):
            env.step(np.zeros(1))
            e = env.total_energy()
            increases.append(e - prev)
            prev = e
        # integrator slop can add tiny blips, but the trend is decay
        assert max(increases) < 0.06
        assert prev < 0.5 * start

    def test_pendulum_rest_at_bottom_stays(self):
        env = make_env("pendulum")
        env.reset(np.random.default_rng(0), NOMINAL)
        env.set_state(np.array([np.pi, 0.0]))
        state, _, _ = env.step(np.zeros(1))
        assert np.allclose(state.internal, [np.pi, 0.0], atol=1e-12)

    def test_balance_fails_on_tilt(self):
        env = make_env("balance")
        env.reset(np.random.default_rng(0), NOMINAL)
        env.set_state(np.array([0.0, 0.0, 0.19, 2.0]))
        _, reward, done = env.step(np.zeros(1))
        assert done
        assert reward == 1.0  # the failing step still pays the survival bonus

    def test_balance_reward_is_one_per_step(self):
        env = make_env("balance")
        rng = np.random.default_rng(3)
        env.reset(rng, NOMINAL)
        total = 0.0
        done = False
        n = 0
        while not done:
            _, r, done = env.step(rng.uniform(-1, 1, 1))
            total += r
            n += 1
        assert total == n


class TestInvariants:
    @pytest.mark.parametrize("name", ["msd", "pendulum", "balance"])
    def test_bitwise_determinism(self, name):
        def rollout(seed):
            env = make_env(name)
            rng = np.random.default_rng(seed)
            s = env.reset(rng)
            obs = [s.observation]
            for _ in range(50):
                s, r, done = env.step(rng.uniform(-1, 1, env.dim_a))
                obs.append(s.observation)
                if done:
                    break
            return np.concatenate(obs)

        a, b = rollout(42), rollout(42)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("name", ["msd", "pendulum", "balance"])
    def test_observations_finite(self, name):
        env = make_env(name)
        rng = np.random.default_rng(1)
        for _ in range(3):
            s = env.reset(rng)
            done = False
            while not done:
                s, _, done = env.step(rng.uniform(-1, 1, env.dim_a))
                assert np.all(np.isfinite(s.observation))
                assert s.observation.shape == (env.dim_s,)

    def test_pendulum_angle_embedded(self):
        env = make_env("pendulum")
        rng = np.random.default_rng(2)
        s = env.reset(rng)
        done = False
        while not done:
            s, _, done = env.step(rng.uniform(-1, 1, 1))
            assert -1 <= s.observation[0] <= 1
            assert -1 <= s.observation[1] <= 1
            assert np.isclose(s.observation[0] ** 2 + s.observation[1] ** 2, 1.0)

    @settings(max_examples=25)
    @given(st.floats(-1.0, 1.0), st.floats(-0.5, 0.5))
    def test_msd_heavier_mass_moves_less_from_rest(self, action, x0):
        # displacement caused by a net force shrinks as inertia grows
        def disp(ms):
            env = make_env("msd")
            env.reset(np.random.default_rng(0), EnvParams(mass_scale=ms))
            env.set_state(np.array([x0, 0.0]))
            s, _, _ = env.step(np.array([action]))
            return abs(s.internal[0] - x0)

        net_force = 2.0 * np.clip(action, -1, 1) - 1.0 * x0
        if abs(net_force) < 1e-3:
            return
        assert disp(0.75) > disp(1.0) > disp(1.25)


class TestCatalog:
    def test_catalog_contents(self):
        cat = {d.name: d for d in env_catalog()}
        assert set(cat) == {"msd", "pendulum", "balance"}
        assert cat["msd"].dim_s == 2
        assert cat["pendulum"].dim_s == 3
        assert cat["balance"].dim_s == 4
        assert all(d.dim_a == 1 for d in cat.values())
        assert all(d.horizon == 200 for d in cat.values())

    def test_unknown_env_rejected(self):
        with pytest.raises(KeyError, match="unknown"):
            make_env("hopper")


class TestNormalizedScore:
    def test_endpoints(self):
        refs = {"msd": (-50.0, -5.0)}
        assert normalized_score("msd", -50.0, refs) == 0.0
        assert normalized_score("msd", -5.0, refs) == 100.0

    def test_midpoint(self):
        refs = {"balance": (10.0, 210.0)}
        assert normalized_score("balance", 110.0, refs) == 50.0

    def test_missing_reference_raises(self):
        with pytest.raises(KeyError, match="balance"):
            normalized_score("balance", 1.0, {})

    def test_reference_file_roundtrip(self, tmp_path):
        refs = {"msd": (-51.25, -4.125), "balance": (9.5, 200.0)}
        p = tmp_path / "refs.txt"
        write_reference_returns(p, refs)
        assert read_reference_returns(p) == refs
