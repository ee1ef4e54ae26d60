"""Parameter storage, Adam, network building blocks, checkpoint io.

Parameters live as named float32 arrays in a ParamStore.  Each training
step binds them to fresh autodiff leaves, runs the graph, then applies
Adam in place.  Binding with trainable=False produces constants, which
keeps the tape empty: that is the inference path.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad

__all__ = [
    "ParamStore", "ema_update", "uniform_fan_in",
    "init_mlp", "apply_mlp", "init_policy", "policy_heads",
    "squashed_gaussian_sample", "squashed_gaussian_logp", "atanh_clip",
    "write_entries", "read_entries", "save_stores", "load_stores",
    "LOG_STD_MIN", "LOG_STD_MAX", "CheckpointError",
]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

_HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))
_LOG2 = float(np.log(2.0))


class CheckpointError(RuntimeError):
    pass


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, float32."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) <= 2 else int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ParamStore:
    """Named float32 arrays plus Adam state, updated in place."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        self._params[name] = np.asarray(value, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._params[name] = np.asarray(value, dtype=np.float32)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def n_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def bind(self, trainable: bool = True) -> dict[str, ad.Var]:
        """Fresh Vars over the stored arrays (no copy)."""
        if trainable:
            return {k: ad.leaf(v) for k, v in self._params.items()}
        return {k: ad.Var(v) for k, v in self._params.items()}

    def adam_step(self, bound: dict[str, ad.Var], lr: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Bias-corrected Adam over every bound parameter, in place."""
        self.step += 1
        c1 = 1.0 - beta1 ** self.step
        c2 = 1.0 - beta2 ** self.step
        for name, var in bound.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            if var.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; did the loss use it?")
            g = var.grad.astype(np.float32, copy=False)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(self._params[name])
            v = self._v.get(name)
            if v is None:
                v = self._v[name] = np.zeros_like(self._params[name])
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            with np.errstate(over="ignore"):
                v += (1.0 - beta2) * np.square(g)
            # a gradient spike must not pin v at inf for the rest of the run
            np.minimum(v, np.float32(1e30), out=v)
            self._params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def clone_params(self) -> "ParamStore":
        """Copy of the parameter arrays only (no optimizer state)."""
        out = ParamStore()
        for k, p in self._params.items():
            out.add(k, p.copy())
        return out

    def state_entries(self, include_optimizer: bool = True) -> dict[str, np.ndarray]:
        ent: dict[str, np.ndarray] = dict(self._params)
        if include_optimizer:
            for k, m in self._m.items():
                ent[k + ".adam_m"] = m
            for k, v in self._v.items():
                ent[k + ".adam_v"] = v
            ent["adam_step"] = np.asarray(float(self.step), dtype=np.float32)
        return ent

    def load_state_entries(self, ent: dict[str, np.ndarray]) -> None:
        for k, v in ent.items():
            if k == "adam_step":
                self.step = int(v)
            elif k.endswith(".adam_m"):
                self._m[k[:-7]] = np.asarray(v, dtype=np.float32)
            elif k.endswith(".adam_v"):
                self._v[k[:-7]] = np.asarray(v, dtype=np.float32)
            else:
                self._params[k] = np.asarray(v, dtype=np.float32)


def ema_update(target: ParamStore, online: ParamStore, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise."""
    for name in online._params:
        t = target._params[name]
        t *= 1.0 - tau
        t += tau * online._params[name]


# ---------------------------------------------------------------------------
# MLP and policy builders


def init_mlp(store: ParamStore, prefix: str, dims: list[int], rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        store.add(f"{prefix}.w{i}", uniform_fan_in(rng, (dims[i], dims[i + 1])))
        store.add(f"{prefix}.b{i}", uniform_fan_in(rng, (dims[i + 1],), fan_in=dims[i]))


def apply_mlp(bound: dict[str, ad.Var], prefix: str, x: ad.Var, n_layers: int,
              hidden_act=ad.relu) -> ad.Var:
    """n_layers affine layers; activation on all but the last."""
    for i in range(n_layers):
        x = ad.affine(x, bound[f"{prefix}.w{i}"], bound[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = hidden_act(x)
    return x


def init_policy(store: ParamStore, prefix: str, dim_in: int, dim_a: int,
                hidden: list[int], rng: np.random.Generator) -> None:
    """Shared trunk with separate mean and log-std heads."""
    init_mlp(store, f"{prefix}.trunk", [dim_in] + hidden, rng)
    h = hidden[-1]
    store.add(f"{prefix}.mean_w", uniform_fan_in(rng, (h, dim_a)))
    store.add(f"{prefix}.mean_b", uniform_fan_in(rng, (dim_a,), fan_in=h))
    store.add(f"{prefix}.logstd_w", uniform_fan_in(rng, (h, dim_a)))
    store.add(f"{prefix}.logstd_b", uniform_fan_in(rng, (dim_a,), fan_in=h))


def policy_heads(bound: dict[str, ad.Var], prefix: str, x: ad.Var,
                 n_hidden: int) -> tuple[ad.Var, ad.Var]:
    h = apply_mlp(bound, f"{prefix}.trunk", x, n_hidden)
    h = ad.relu(h)
    mean = ad.affine(h, bound[f"{prefix}.mean_w"], bound[f"{prefix}.mean_b"])
    log_std = ad.clamp(
        ad.affine(h, bound[f"{prefix}.logstd_w"], bound[f"{prefix}.logstd_b"]),
        LOG_STD_MIN, LOG_STD_MAX,
    )
    return mean, log_std


# ---------------------------------------------------------------------------
# tanh-squashed Gaussian


def _squash_correction(u: ad.Var) -> ad.Var:
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u)), stable for large |u|
    return ad.mul(ad.sub(ad.constant(np.float32(_LOG2)), ad.add(u, ad.softplus(ad.mul(u, -2.0)))), 2.0)


def squashed_gaussian_sample(mean: ad.Var, log_std: ad.Var,
                             noise: np.ndarray) -> tuple[ad.Var, ad.Var]:
    """Reparameterized sample a = tanh(mean + std * noise) and its log-density.

    noise is standard normal, drawn by the caller.  Log-density is summed
    over action dims, shape (batch, 1).
    """
    eps = ad.constant(noise.astype(np.float32))
    u = ad.add(mean, ad.mul(ad.exp(log_std), eps))
    a = ad.tanh(u)
    gauss = ad.sub(ad.mul(ad.square(eps), -0.5),
                   ad.add(log_std, ad.constant(np.float32(_HALF_LOG_2PI))))
    logp = ad.reduce_sum(ad.sub(gauss, _squash_correction(u)), axis=1, keepdims=True)
    return a, logp


def atanh_clip(a: np.ndarray, bound: float = 1.0 - 1e-6) -> np.ndarray:
    return np.arctanh(np.clip(a, -bound, bound))


def squashed_gaussian_logp(mean: ad.Var, log_std: ad.Var, action: np.ndarray) -> ad.Var:
    """Log-density of a given squashed action, shape (batch, 1).

    Inverts the squash outside the graph: the correction term depends only
    on the action, so it shifts the density without touching gradients.
    """
    u = atanh_clip(np.asarray(action, dtype=np.float64)).astype(np.float32)
    corr = 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))
    z = ad.mul(ad.sub(ad.constant(u), mean), ad.exp(ad.neg(log_std)))
    gauss = ad.sub(ad.mul(ad.square(z), -0.5),
                   ad.add(log_std, ad.constant(np.float32(_HALF_LOG_2PI))))
    return ad.reduce_sum(ad.sub(gauss, ad.constant(corr)), axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoint wire format
#
# u32 version, u32 entry count, then per entry:
#   u16 name length, utf-8 name, u8 ndim, u32 * ndim dims,
#   little-endian float32 payload.

CKPT_VERSION = 1


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype="<f4")  # tobytes() emits C order
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def read_entries(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise CheckpointError("truncated header")
        version, count = struct.unpack("<II", head)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise CheckpointError(f"truncated payload for {name!r}")
            entries[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after last entry")
    return entries


def save_stores(path, stores: dict[str, ParamStore], include_optimizer: bool = True) -> None:
    """Write several stores into one file; keys are prefixes like 'actor.'."""
    entries: dict[str, np.ndarray] = {}
    for prefix, store in stores.items():
        for k, v in store.state_entries(include_optimizer).items():
            entries[prefix + k] = v
    write_entries(path, entries)


def load_stores(path, stores: dict[str, ParamStore]) -> None:
    """Restore stores saved with matching prefixes; extra prefixes are ignored."""
    entries = read_entries(path)
    for prefix, store in stores.items():
        sub = {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}
        if not sub:
            raise CheckpointError(f"checkpoint has no entries under prefix {prefix!r}")
        store.load_state_entries(sub)
