"""Array-valued reverse-mode automatic differentiation on a flat tape.

Values are numpy arrays: float32 for training, float64 for gradient
checking.  Ops record a backward closure onto the active tape only when
some input requires gradients, so the same network code serves both
training and no-grad inference (wrap inputs with ``constant`` and nothing
is recorded).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var", "Tape", "tape", "constant", "leaf", "backward",
    "add", "sub", "neg", "mul", "div", "matmul", "affine",
    "relu", "tanh", "exp", "log", "sqrt", "square", "softplus",
    "clamp", "minimum", "reduce_sum", "reduce_mean", "concat",
    "reshape", "conv1d",
    "ShapeError", "TapeError",
]


class ShapeError(ValueError):
    """An op received arrays whose shapes do not fit its contract."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


class TapeError(RuntimeError):
    pass


class Var:
    """A node in the computation: a numpy array plus an adjoint slot."""

    __slots__ = ("value", "grad", "requires_grad", "_vjp")

    def __init__(self, value, requires_grad=False, _vjp=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._vjp = _vjp

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, requires_grad={self.requires_grad})"


class Tape:
    """Differentiable ops in execution order; execution order is topological."""

    def __init__(self):
        self._nodes: list[Var] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)


_STACK: list[Tape] = []


def tape() -> Tape:
    return Tape()


def constant(value, dtype=None) -> Var:
    """A Var that never receives gradients."""
    arr = np.asarray(value, dtype=dtype)
    return Var(arr)


def leaf(value) -> Var:
    """A gradient-receiving input (parameter) node.  Not recorded on the tape."""
    return Var(np.asarray(value), requires_grad=True)


def _out(value, vjp, parents) -> Var:
    if not any(p.requires_grad for p in parents):
        return Var(value)
    if not _STACK:
        raise TapeError("differentiable op executed outside a tape context")
    v = Var(value, requires_grad=True, _vjp=vjp)
    _STACK[-1]._nodes.append(v)
    return v


def _acc(p: Var, g, fresh: bool):
    """Accumulate adjoint g into parent p.  fresh=True means g is uniquely owned."""
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = g if fresh else g.copy()
    else:
        p.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse a numpy broadcast)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Var):
    """Reverse pass from a scalar loss; fills .grad on reachable leaves."""
    if np.size(loss.value) != 1:
        raise ShapeError("backward", "scalar loss", np.shape(loss.value))
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any gradient-receiving leaf")
    if not _STACK:
        raise TapeError("backward called outside a tape context")
    loss.grad = np.ones_like(loss.value)
    for node in reversed(_STACK[-1]._nodes):
        if node.grad is None or node._vjp is None:
            continue
        node._vjp(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def _lift(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = a.value + b.value

    def vjp(g):
        _acc(a, _unbroadcast(g, a.value.shape), g.shape != a.value.shape)
        _acc(b, _unbroadcast(g, b.value.shape), g.shape != b.value.shape)

    return _out(out, vjp, (a, b))


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = a.value - b.value

    def vjp(g):
        _acc(a, _unbroadcast(g, a.value.shape), g.shape != a.value.shape)
        _acc(b, _unbroadcast(-g, b.value.shape), True)

    return _out(out, vjp, (a, b))


def neg(a) -> Var:
    a = _lift(a)

    def vjp(g):
        _acc(a, -g, True)

    return _out(-a.value, vjp, (a,))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = a.value * b.value

    def vjp(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.value, a.value.shape), True)
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.value, b.value.shape), True)

    return _out(out, vjp, (a, b))


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = a.value / b.value

    def vjp(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.value, a.value.shape), True)
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.value, b.value.shape), True)

    return _out(out, vjp, (a, b))


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError("matmul", "(n,k) @ (k,m)", (a.value.shape, b.value.shape))
    out = a.value @ b.value

    def vjp(g):
        if a.requires_grad:
            _acc(a, g @ b.value.T, True)
        if b.requires_grad:
            _acc(b, a.value.T @ g, True)

    return _out(out, vjp, (a, b))


def affine(x, w, b) -> Var:
    """x @ w + b with b broadcast over rows; the usual dense layer."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeError("affine", "(n,k) @ (k,m)", (x.value.shape, w.value.shape))
    if b.value.shape != (w.value.shape[1],):
        raise ShapeError("affine bias", (w.value.shape[1],), b.value.shape)
    out = x.value @ w.value
    out += b.value

    def vjp(g):
        if x.requires_grad:
            _acc(x, g @ w.value.T, True)
        if w.requires_grad:
            _acc(w, x.value.T @ g, True)
        if b.requires_grad:
            _acc(b, g.sum(axis=0), True)

    return _out(out, vjp, (x, w, b))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a) -> Var:
    a = _lift(a)
    out = np.maximum(a.value, 0)

    def vjp(g):
        _acc(a, g * (a.value > 0), True)

    return _out(out, vjp, (a,))


def tanh(a) -> Var:
    a = _lift(a)
    out = np.tanh(a.value)

    def vjp(g):
        _acc(a, g * (1.0 - out * out), True)

    return _out(out, vjp, (a,))


def exp(a) -> Var:
    a = _lift(a)
    out = np.exp(a.value)

    def vjp(g):
        _acc(a, g * out, True)

    return _out(out, vjp, (a,))


def log(a) -> Var:
    a = _lift(a)
    out = np.log(a.value)

    def vjp(g):
        _acc(a, g / a.value, True)

    return _out(out, vjp, (a,))


def sqrt(a) -> Var:
    a = _lift(a)
    out = np.sqrt(a.value)

    def vjp(g):
        _acc(a, g * (0.5 / out), True)

    return _out(out, vjp, (a,))


def square(a) -> Var:
    a = _lift(a)

    def vjp(g):
        _acc(a, g * (2.0 * a.value), True)

    return _out(a.value * a.value, vjp, (a,))


def softplus(a) -> Var:
    """log(1 + exp(a)), computed stably."""
    a = _lift(a)
    out = np.logaddexp(0.0, a.value)

    def vjp(g):
        _acc(a, g / (1.0 + np.exp(-a.value)), True)

    return _out(out, vjp, (a,))


def clamp(a, lo: float, hi: float) -> Var:
    """Clip to [lo, hi]; gradient passes through only inside the range."""
    a = _lift(a)
    out = np.clip(a.value, lo, hi)

    def vjp(g):
        _acc(a, g * ((a.value >= lo) & (a.value <= hi)), True)

    return _out(out, vjp, (a,))


def minimum(a, b) -> Var:
    """Elementwise min; the smaller input gets the gradient (ties go to a)."""
    a, b = _lift(a), _lift(b)
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)

    def vjp(g):
        if a.requires_grad:
            _acc(a, g * take_a, True)
        if b.requires_grad:
            _acc(b, g * ~take_a, True)

    return _out(out, vjp, (a, b))


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.value.shape).copy(), True)

    return _out(out, vjp, (a,))


def reduce_mean(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    n = a.value.size / max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g / n, a.value.shape).copy(), True)

    return _out(out, vjp, (a,))


def concat(parts, axis=-1) -> Var:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _acc(p, piece, False)

    return _out(out, vjp, tuple(parts))


def reshape(a, shape) -> Var:
    a = _lift(a)

    def vjp(g):
        _acc(a, g.reshape(a.value.shape), False)

    return _out(a.value.reshape(shape), vjp, (a,))


# ---------------------------------------------------------------------------
# 1-D convolution (cross-correlation over the trailing time axis)


def conv1d(x, k) -> Var:
    """Valid cross-correlation: (B, C_in, T) * (C_out, C_in, W) -> (B, C_out, T-W+1).

    A 2-D input (C_in, T) is treated as a batch of one and returns 2-D.
    """
    x, k = _lift(x), _lift(k)
    squeeze = x.value.ndim == 2
    xv = x.value[None] if squeeze else x.value
    kv = k.value
    if xv.ndim != 3 or kv.ndim != 3 or xv.shape[1] != kv.shape[1]:
        raise ShapeError("conv1d", "(B,C_in,T) with kernels (C_out,C_in,W)", (x.value.shape, kv.shape))
    b, c_in, t = xv.shape
    c_out, _, w = kv.shape
    if t < w:
        raise ShapeError("conv1d", f"time >= kernel width {w}", f"time {t}")
    t_out = t - w + 1
    # im2col: patches (B, T_out, C_in*W) then a single matmul
    win = np.lib.stride_tricks.sliding_window_view(xv, w, axis=2)  # (B, C_in, T_out, W)
    patches = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * t_out, c_in * w)
    kmat = kv.reshape(c_out, c_in * w).T  # (C_in*W, C_out)
    out = (patches @ kmat).reshape(b, t_out, c_out).transpose(0, 2, 1)
    if squeeze:
        out = out[0]

    def vjp(g):
        gv = g[None] if squeeze else g                      # (B, C_out, T_out)
        gmat = np.ascontiguousarray(gv.transpose(0, 2, 1)).reshape(b * t_out, c_out)
        if k.requires_grad:
            gk = (patches.T @ gmat).T.reshape(c_out, c_in, w)
            _acc(k, gk, True)
        if x.requires_grad:
            gp = (gmat @ kmat.T).reshape(b, t_out, c_in, w)
            gx = np.zeros_like(xv)
            for j in range(w):                              # overlap-add, W <= 4 here
                gx[:, :, j:j + t_out] += gp[:, :, :, j].transpose(0, 2, 1)
            _acc(x, gx[0] if squeeze else gx, True)

    return _out(out, vjp, (x, k))
