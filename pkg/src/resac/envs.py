"""Continuous-control environments with per-episode dynamics multipliers.

Each reset redraws hidden mass/damping multipliers from a small discrete
support, then holds them fixed for the episode.  Dynamics integrate with
semi-implicit Euler in float64; observations come out as float64 vectors.

Suite:
  msd       mass on a spring with a damper, push it to the origin
  pendulum  torque-limited swing-up, angle embedded as (cos, sin)
  balance   cart-pole balance, +1 per step, fails on large tilt
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EnvParams", "EnvState", "ScaleDistribution", "DynamicsEnv",
    "MassSpringDamper", "Pendulum", "CartBalance",
    "make_env", "env_catalog", "EnvDescriptor",
    "normalized_score", "read_reference_returns", "write_reference_returns",
    "DEFAULT_SUPPORT",
]

DEFAULT_SUPPORT = (0.75, 0.85, 1.0, 1.15, 1.25)


@dataclass(frozen=True)
class EnvParams:
    """Per-episode dynamics multipliers, all relative to nominal = 1."""

    mass_scale: float = 1.0
    damping_scale: float = 1.0
    friction_scale: float = 1.0
    length_scale: float = 1.0

    def validate(self) -> "EnvParams":
        for f in ("mass_scale", "damping_scale", "friction_scale", "length_scale"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be strictly positive, got {getattr(self, f)}")
        return self


@dataclass(frozen=True)
class ScaleDistribution:
    support: tuple[float, ...] = DEFAULT_SUPPORT

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.support[rng.integers(len(self.support))])


@dataclass
class EnvState:
    observation: np.ndarray
    internal: np.ndarray
    step_index: int


class DynamicsEnv:
    """Base: horizon bookkeeping, scale resampling, the step loop."""

    name: str = ""
    dim_s: int = 0
    dim_a: int = 1
    reward_description: str = ""

    def __init__(self, horizon: int = 200, dt: float = 0.05,
                 scales: ScaleDistribution = ScaleDistribution()):
        self.horizon = int(horizon)
        self.dt = float(dt)
        self.scales = scales
        self._params = EnvParams()
        self._internal: np.ndarray | None = None
        self._t = 0
        self._done = True
        self._failed = False

    @property
    def params(self) -> EnvParams:
        return self._params

    @property
    def terminated_by_failure(self) -> bool:
        """True when the last step ended the episode by failure, not horizon.

        Time-limit endings bootstrap in TD targets; failures do not.
        """
        return self._failed

    def reset(self, rng: np.random.Generator, override: EnvParams | None = None) -> EnvState:
        if override is not None:
            self._params = override.validate()
        else:
            # draw order is part of the determinism contract: mass, damping, then init noise
            self._params = EnvParams(
                mass_scale=self.scales.sample(rng),
                damping_scale=self.scales.sample(rng),
            )
        self._internal = self._sample_init(rng)
        self._t = 0
        self._done = False
        self._failed = False
        return self._state()

    def set_state(self, internal: np.ndarray) -> EnvState:
        """Force the internal state; for tests and diagnostics."""
        internal = np.asarray(internal, dtype=np.float64)
        if internal.shape != (self._internal_dim,):
            raise ValueError(f"internal state must have shape ({self._internal_dim},)")
        self._internal = internal.copy()
        self._t = 0
        self._done = False
        self._failed = False
        return self._state()

    def step(self, action: np.ndarray) -> tuple[EnvState, float, bool]:
        if self._done:
            raise RuntimeError("step() called on a finished episode; reset first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.dim_a), -1.0, 1.0)
        reward, failed = self._advance(a)
        self._t += 1
        self._failed = bool(failed)
        self._done = self._failed or self._t >= self.horizon
        return self._state(), float(reward), self._done

    def _state(self) -> EnvState:
        return EnvState(self._observe(), self._internal.copy(), self._t)

    # subclass surface
    _internal_dim: int = 0

    def _sample_init(self, rng) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError


class MassSpringDamper(DynamicsEnv):
    """m x'' = u_max a - c x' - k x, pushed from x = -1 toward the origin."""

    name = "msd"
    dim_s = 2
    reward_description = "-(x)^2 - 0.01 a^2, target at the spring equilibrium"
    _internal_dim = 2

    M0 = 1.0
    K = 1.0
    C0 = 0.5
    U_MAX = 2.0

    def _sample_init(self, rng) -> np.ndarray:
        return np.array([-1.0, 0.0]) + rng.uniform(-0.05, 0.05, size=2)

    def _advance(self, action) -> tuple[float, bool]:
        x, v = self._internal
        m = self.M0 * self._params.mass_scale
        c = self.C0 * self._params.damping_scale
        acc = (self.U_MAX * action[0] - c * v - self.K * x) / m
        v = v + self.dt * acc
        x = x + self.dt * v
        self._internal = np.array([x, v])
        reward = -(x * x) - 0.01 * float(action[0] ** 2)
        return reward, False

    def _observe(self) -> np.ndarray:
        return self._internal.copy()


def _wrap_angle(theta: float) -> float:
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


class Pendulum(DynamicsEnv):
    """Swing-up with limited torque; angle 0 is upright, starts hanging."""

    name = "pendulum"
    dim_s = 3
    reward_description = "-(angle^2 + 0.1 w^2 + 0.001 torque^2), angle from upright"
    _internal_dim = 2

    G = 10.0
    L = 1.0
    M0 = 1.0
    C0 = 0.1
    U_MAX = 2.0

    def _sample_init(self, rng) -> np.ndarray:
        return np.array([np.pi, 0.0]) + rng.uniform(-0.1, 0.1, size=2)

    def _advance(self, action) -> tuple[float, bool]:
        th, w = self._internal
        m = self.M0 * self._params.mass_scale
        c = self.C0 * self._params.damping_scale
        torque = self.U_MAX * action[0]
        acc = (self.G / self.L) * np.sin(th) + (torque - c * w) / (m * self.L**2)
        w = w + self.dt * acc
        th = th + self.dt * w
        self._internal = np.array([th, w])
        a_err = _wrap_angle(th)
        reward = -(a_err**2 + 0.1 * w**2 + 0.001 * torque**2)
        return reward, False

    def _observe(self) -> np.ndarray:
        th, w = self._internal
        return np.array([np.cos(th), np.sin(th), w])

    def total_energy(self) -> float:
        """Kinetic plus potential, zero at rest hanging down."""
        th, w = self._internal
        m = self.M0 * self._params.mass_scale
        ke = 0.5 * m * self.L**2 * w**2
        pe = m * self.G * self.L * (1.0 + np.cos(th))
        return float(ke + pe)


class CartBalance(DynamicsEnv):
    """Cart-pole balance: +1 per step, ends when the pole tilts too far.

    Pivot damping follows damping_scale, viscous ground friction on the
    cart follows friction_scale, pole length follows length_scale, and
    both masses follow mass_scale.
    """

    name = "balance"
    dim_s = 4
    reward_description = "+1 per step survived; fails at |angle| > 0.2 or |x| > 2.4"
    _internal_dim = 4

    G = 9.8
    M_CART0 = 1.0
    M_POLE0 = 0.1
    L0 = 0.5
    U_MAX = 10.0
    PIVOT_DAMPING0 = 0.05
    CART_FRICTION0 = 0.1
    ANGLE_FAIL = 0.2
    X_FAIL = 2.4

    def _sample_init(self, rng) -> np.ndarray:
        # wide enough that a sloppy policy pays for its regression error
        return rng.uniform(-0.1, 0.1, size=4)

    def _advance(self, action) -> tuple[float, bool]:
        x, xd, th, thd = self._internal
        p = self._params
        m_c = self.M_CART0 * p.mass_scale
        m_p = self.M_POLE0 * p.mass_scale
        length = self.L0 * p.length_scale
        b_pivot = self.PIVOT_DAMPING0 * p.damping_scale
        b_cart = self.CART_FRICTION0 * p.friction_scale
        total = m_c + m_p

        sin, cos = np.sin(th), np.cos(th)
        force = self.U_MAX * action[0] - b_cart * xd
        tmp = (force + m_p * length * thd**2 * sin) / total
        th_acc = (self.G * sin - cos * tmp - b_pivot * thd / (m_p * length)) / (
            length * (4.0 / 3.0 - m_p * cos**2 / total))
        x_acc = tmp - m_p * length * th_acc * cos / total

        xd = xd + self.dt * x_acc
        x = x + self.dt * xd
        thd = thd + self.dt * th_acc
        th = th + self.dt * thd
        self._internal = np.array([x, xd, th, thd])
        failed = abs(th) > self.ANGLE_FAIL or abs(x) > self.X_FAIL
        return 1.0, failed

    def _observe(self) -> np.ndarray:
        return self._internal.copy()


# ---------------------------------------------------------------------------
# catalog and factory


@dataclass(frozen=True)
class EnvDescriptor:
    name: str
    dim_s: int
    dim_a: int
    horizon: int
    reward_description: str


_ENVS: dict[str, type[DynamicsEnv]] = {
    "msd": MassSpringDamper,
    "pendulum": Pendulum,
    "balance": CartBalance,
}


def make_env(name: str, horizon: int = 200, dt: float = 0.05,
             scales: ScaleDistribution | None = None) -> DynamicsEnv:
    if name not in _ENVS:
        raise KeyError(f"unknown environment {name!r}; have {sorted(_ENVS)}")
    return _ENVS[name](horizon=horizon, dt=dt, scales=scales or ScaleDistribution())


def env_catalog() -> list[EnvDescriptor]:
    return [
        EnvDescriptor(cls.name, cls.dim_s, cls.dim_a, 200, cls.reward_description)
        for cls in _ENVS.values()
    ]


# ---------------------------------------------------------------------------
# score normalization against measured reference returns


def normalized_score(env_name: str, raw_return: float,
                     refs: dict[str, tuple[float, float]]) -> float:
    """100 * (raw - random) / (expert - random)."""
    if env_name not in refs:
        raise KeyError(f"no reference returns registered for {env_name!r}")
    lo, hi = refs[env_name]
    return 100.0 * (raw_return - lo) / (hi - lo)


def write_reference_returns(path, refs: dict[str, tuple[float, float]]) -> None:
    with open(path, "w") as f:
        f.write("# env random expert\n")
        for name in sorted(refs):
            lo, hi = refs[name]
            f.write(f"{name} random={lo!r} expert={hi!r}\n")


def read_reference_returns(path) -> dict[str, tuple[float, float]]:
    refs: dict[str, tuple[float, float]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, lo, hi = line.split()
            refs[name] = (float(lo.removeprefix("random=")),
                          float(hi.removeprefix("expert=")))
    return refs
