"""Run configuration as flat dotted key-value text.

One dataclass backs every subcommand; files and --set overrides address its
fields through dotted names (env.*, run.*, encoder.*, sac.*).  The effective
config is echoed next to each run's outputs so the pair (echo, seed) replays
the run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "ConfigError", "RunConfig", "PROFILES", "make_config", "parse_pairs",
    "apply_pairs", "load_config", "echo_config", "save_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # env.*
    env: str = "msd"
    horizon: int = 200
    dt: float = 0.05

    # run.*
    seed: int = 0
    total_steps: int = 250_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    checkpoint_interval: int = 25_000
    offline_weight: float = 0.75     # share of the offline action in the blend
    dataset: str = ""
    offline_policy: str = ""
    references: str = ""             # reference-returns file; blank = raw scores only

    # encoder.*
    history: int = 10                # trailing steps fed to the encoder; also warmup length
    rollout: int = 5                 # prediction depth of the k-step loss
    groups: int = 4                  # windows per encoder batch, all one trajectory
    consistency_weight: float = 0.1
    latent: int = 8
    channels: int = 32
    encoder_lr: float = 1e-4

    # sac.*
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    temperature_lr: float = 3e-4
    init_temperature: float = 0.2
    batch_size: int = 256
    # residual actor starts near zero so early blended actions track the
    # offline policy; the scratch baseline resets these to 1.0 / 0.0
    actor_final_scale: float = 0.01
    log_std_bias: float = -2.0

    def validate(self) -> "RunConfig":
        if self.total_steps < 0:
            raise ConfigError("run.total_steps must be >= 0")
        if self.eval_interval <= 0 or self.eval_episodes < 1:
            raise ConfigError("eval interval/episodes must be positive")
        if self.checkpoint_interval <= 0:
            raise ConfigError("run.checkpoint_interval must be positive")
        if not 0.0 <= self.offline_weight <= 1.0:
            raise ConfigError("run.offline_weight must lie in [0, 1]")
        if min(self.history, self.rollout, self.groups, self.latent) < 1:
            raise ConfigError("encoder sizes must be >= 1")
        if min(self.encoder_lr, self.actor_lr, self.critic_lr,
               self.temperature_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("sac.batch_size must be >= 1")
        return self


_SECTION = {
    "env": ("env", "horizon", "dt"),
    "run": ("seed", "total_steps", "eval_interval", "eval_episodes",
            "checkpoint_interval", "offline_weight", "dataset",
            "offline_policy", "references"),
    "encoder": ("history", "rollout", "groups", "consistency_weight",
                "latent", "channels", "encoder_lr"),
    "sac": ("hidden", "gamma", "tau", "actor_lr", "critic_lr",
            "temperature_lr", "init_temperature", "batch_size",
            "actor_final_scale", "log_std_bias"),
}
# env.name reads better than env.env at the call site
_KEY_TO_FIELD = {(f"{sec}.name" if f == "env" else f"{sec}.{f}"): f
                 for sec, fields in _SECTION.items() for f in fields}
_FIELD_TO_KEY = {f: k for k, f in _KEY_TO_FIELD.items()}

PROFILES = {
    "default": {},
    "fast": {"run.total_steps": "100000"},
}


def _coerce(key: str, fld: dataclasses.Field, raw):
    raw = str(raw).strip()
    try:
        if fld.type in ("int", int):
            return int(raw)
        if fld.type in ("float", float):
            return float(raw)
        if fld.type in ("list[int]",):
            return [int(p) for p in raw.split(",") if p.strip()]
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None
    return raw


def _format(value) -> str:
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(text: str) -> dict[str, str]:
    """'key = value' lines; '#' starts a comment; blank lines ignored."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        pairs[key.strip()] = raw.strip()
    return pairs


def apply_pairs(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    unknown = sorted(k for k in pairs if k not in _KEY_TO_FIELD)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    updates = {}
    for key, raw in pairs.items():
        name = _KEY_TO_FIELD[key]
        updates[name] = _coerce(key, fields[name], raw)
    return dataclasses.replace(cfg, **updates)


def make_config(profile: str = "default", overrides: dict[str, str] | None = None) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; have {sorted(PROFILES)}")
    cfg = apply_pairs(RunConfig(), PROFILES[profile])
    if overrides:
        cfg = apply_pairs(cfg, overrides)
    return cfg.validate()


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = apply_pairs(RunConfig(), parse_pairs(Path(path).read_text()))
    if overrides:
        cfg = apply_pairs(cfg, overrides)
    return cfg.validate()


def echo_config(cfg: RunConfig) -> str:
    lines = [f"{_FIELD_TO_KEY[f.name]} = {_format(getattr(cfg, f.name))}"
             for f in dataclasses.fields(cfg)]
    return "\n".join(sorted(lines)) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(echo_config(cfg))
