"""Dense tensors with a reverse-mode gradient tape, plus the layer set the
autoencoder and its classifier heads need.

Arrays are plain numpy; a :class:`Tensor` remembers the operation that made it
and a closure that pushes its gradient back to its parents.  Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order.  Heavy layers (convolution, LSTM) are single fused nodes with
hand-written backward passes.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DegenerateBatch,
    InvalidConfig,
    IOFailure,
    NonFiniteValue,
    ShapeMismatch,
    VersionMismatch,
)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite value in {what}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            _check_finite(node.grad, f"gradient of {node.op}")
            node._backward(node.grad)
            # intermediates keep no gradient once propagated
            node.grad = None

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("tensor / tensor is not needed by any layer")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _push(t, g):
    if isinstance(t, Tensor) and t.requires_grad:
        t._accumulate(g)


# elementwise and shape ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _push(a, g)
        _push(b, g)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = b

        def backward_scalar(g):
            _push(a, g * s)

        return _node(a.data * s, (a,), backward_scalar, "scale")

    def backward(g):
        _push(a, g * b.data)
        _push(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def total(a):
    a = as_tensor(a)

    def backward(g):
        _push(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _push(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            _push(t, part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _push(a, g @ b.data.T)
        if b.requires_grad:
            _push(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return _node(a.data @ b.data, (a, b), backward, "matmul")


# activations


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _push(x, g * mask)

    return _node(x.data * mask, (x,), backward, "relu")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        _push(x, g * s * (1 - s))

    return _node(s, (x,), backward, "sigmoid")


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        _push(x, g * (1 - t * t))

    return _node(t, (x,), backward, "tanh")


def softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _push(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), backward, "softmax")


def linear(x):
    return as_tensor(x)


ACTIVATIONS: dict[str, Callable] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "tanh": tanh,
    "linear": linear,
}


# layers


def dense(x, weights, bias=None, activation="linear"):
    """Affine map on the last axis followed by an activation."""
    if activation not in ACTIVATIONS:
        raise InvalidConfig(f"unknown activation {activation!r}")
    x = as_tensor(x)
    if x.shape[-1] != weights.shape[0]:
        raise ShapeMismatch(f"dense input width {x.shape[-1]} != weight rows {weights.shape[0]}")
    out = matmul(x, weights)
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeMismatch(f"dense bias {bias.shape} for {weights.shape[1]} units")
        out = add(out, bias)
    return ACTIVATIONS[activation](out)


def _same_pads(k):
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x, kernels, bias=None):
    """Cross-correlation over (time, frequency) with zero 'same' padding.

    x is (B, T, F, C_in) or (T, F, C_in); kernels are (kh, kw, C_in, C_out).
    Even kernel extents put the extra padding row/column after the data.
    """
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (B,T,F,C) input and 4-D kernels, got {x.shape}, {kernels.shape}")
    B, T, F, C = x.shape
    kh, kw, cin, cout = kernels.shape
    if cin != C:
        raise ShapeMismatch(f"conv2d input has {C} channels, kernels expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d bias {bias.shape} for {cout} filters")
    (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # (B, T, F, C, kh, kw)
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    k = kernels.data
    out = np.tensordot(patches, k, axes=([3, 4, 5], [2, 0, 1]))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if kernels.requires_grad:
            gk = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, cout)
            _push(kernels, gk.transpose(1, 2, 0, 3))
        if bias is not None and bias.requires_grad:
            _push(bias, g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + T, j:j + F, :] += g @ k[i, j].T
            _push(x, gxp[:, pt:pt + T, pl:pl + F, :])

    res = _node(out.astype(x.dtype, copy=False), (x, kernels, bias), backward, "conv2d")
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def maxpool_freq(x):
    """Max over the frequency axis: (B, T, F, C) -> (B, T, C); ties go to the lowest bin."""
    x = as_tensor(x)
    if x.data.ndim not in (3, 4):
        raise ShapeMismatch(f"maxpool_freq expects (T,F,C) or (B,T,F,C), got {x.shape}")
    axis = x.data.ndim - 2
    if x.shape[axis] < 1:
        raise ShapeMismatch("maxpool_freq needs at least one frequency bin")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        _push(x, gx)

    return _node(out, (x,), backward, "maxpool_freq")


@dataclass
class LSTMParams:
    """Weights of one LSTM direction; gate order along the 4H axis is i, f, g, o."""

    wx: Tensor  # (D, 4H)
    wh: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden(self):
        return self.wh.shape[0]

    def tensors(self):
        return [self.wx, self.wh, self.b]


def lstm(x, p: LSTMParams, return_sequences=True, reverse=False):
    """Run an LSTM over (B, T, D) with zero initial state.

    With reverse=True time is consumed from the end; the output sequence stays
    aligned with the input's time index.  Many-to-one returns the state after
    the last consumed step.
    """
    x = as_tensor(x)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, T, D = x.shape
    H = p.hidden
    if p.wx.shape != (D, 4 * H) or p.wh.shape != (H, 4 * H) or p.b.shape != (4 * H,):
        raise ShapeMismatch(
            f"lstm params wx{p.wx.shape} wh{p.wh.shape} b{p.b.shape} for input width {D}")
    if T < 1:
        raise ShapeMismatch("lstm needs at least one time step")
    dt = x.dtype
    wx, wh = p.wx.data, p.wh.data
    zx = x.data @ wx + p.b.data  # (B, T, 4H)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    gates = np.empty((B, T, 4 * H), dtype=dt)
    cs = np.empty((B, T, H), dtype=dt)
    hs = np.empty((B, T, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    for t in steps:
        z = zx[:, t] + h @ wh
        a = gates[:, t]
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        h = a[:, 3 * H:] * np.tanh(c)
        cs[:, t] = c
        hs[:, t] = h
    last = (0 if reverse else T - 1)
    out = hs if return_sequences else hs[:, last]

    def backward(g):
        order = list(steps)
        dz_all = np.empty_like(gates)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for n in range(T - 1, -1, -1):
            t = order[n]
            a = gates[:, t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            c_prev = cs[:, order[n - 1]] if n > 0 else np.zeros((B, H), dtype=dt)
            tc = np.tanh(cs[:, t])
            dh = dh_next
            if return_sequences:
                dh = dh + g[:, t]
            elif n == T - 1:
                dh = dh + g
            dc = dc_next + dh * o * (1 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * i * (1 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dz @ wh.T
        if p.wh.requires_grad:
            h_prev = np.zeros_like(hs)
            if reverse:
                h_prev[:, :-1] = hs[:, 1:]
            else:
                h_prev[:, 1:] = hs[:, :-1]
            _push(p.wh, h_prev.reshape(-1, H).T @ dz_all.reshape(-1, 4 * H))
        if p.wx.requires_grad:
            _push(p.wx, x.data.reshape(-1, D).T @ dz_all.reshape(-1, 4 * H))
        if p.b.requires_grad:
            _push(p.b, dz_all.sum(axis=(0, 1)))
        if x.requires_grad:
            _push(x, dz_all @ wx.T)

    res = _node(out, (x, p.wx, p.wh, p.b), backward, "lstm")
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def bilstm(x, forward: LSTMParams, backward: LSTMParams):
    """Many-to-many bidirectional LSTM; forward and backward halves concatenated."""
    return concat([lstm(x, forward), lstm(x, backward, reverse=True)], axis=-1)


def repeat_vector(v, T: int):
    """(B, H) -> (B, T, H), or (H,) -> (T, H)."""
    v = as_tensor(v)
    if T < 1:
        raise ShapeMismatch("repeat_vector needs T >= 1")
    axis = v.data.ndim - 1

    def backward(g):
        _push(v, g.sum(axis=axis))

    out = np.repeat(np.expand_dims(v.data, axis), T, axis=axis)
    return _node(out, (v,), backward, "repeat_vector")


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.99, eps=1e-5):
    """Batch normalization over axis 0 of (B, D).

    Training mode normalizes with batch statistics (biased variance) and moves
    the running moments in place; inference mode uses the running moments.
    """
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm input {x.shape} vs gamma {gamma.shape}")
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatch("batch normalization in training mode needs >= 2 samples")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean.data = (momentum * running_mean.data + (1 - momentum) * mu).astype(running_mean.dtype)
        running_var.data = (momentum * running_var.data + (1 - momentum) * var).astype(running_var.dtype)
    else:
        mu, var = running_mean.data, running_var.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    n = x.shape[0]

    def backward(g):
        _push(gamma, (g * xhat).sum(axis=0))
        _push(beta, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                gx = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            else:
                gx = gx * inv
            _push(x, gx)

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


def dropout(x, rate=0.5, training=False, rng=None):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""
    if not 0 <= rate < 1:
        raise InvalidConfig(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        _push(x, g * mask)

    return _node(x.data * mask, (x,), backward, "dropout")


# losses

PROB_CLAMP = 1e-7


def mse(pred, target):
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"mse prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t

    def backward(g):
        _push(pred, g * 2.0 * diff / diff.size)

    return _node(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred,), backward, "mse")


def binary_cross_entropy(pred, target):
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"bce prediction {pred.shape} vs target {t.shape}")
    p = np.clip(pred.data, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (pred.data > PROB_CLAMP) & (pred.data < 1 - PROB_CLAMP)
    value = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))

    def backward(g):
        _push(pred, g * inside * (-t / p + (1 - t) / (1 - p)) / p.size)

    return _node(np.asarray(value, dtype=pred.dtype), (pred,), backward, "bce")


def categorical_cross_entropy(pred, target):
    """Mean over rows of -sum(target * log(pred)); target rows are distributions."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"cce prediction {pred.shape} vs target {t.shape}")
    p = np.clip(pred.data, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (pred.data > PROB_CLAMP) & (pred.data < 1 - PROB_CLAMP)
    rows = p.shape[0] if p.ndim > 1 else 1
    value = -np.sum(t * np.log(p)) / rows

    def backward(g):
        _push(pred, g * inside * (-t / p) / rows)

    return _node(np.asarray(value, dtype=pred.dtype), (pred,), backward, "cce")


LOSSES = {
    "mse": mse,
    "binary-cross-entropy": binary_cross_entropy,
    "categorical-cross-entropy": categorical_cross_entropy,
}


def loss(pred, target, kind="mse"):
    if kind not in LOSSES:
        raise InvalidConfig(f"unknown loss {kind!r}")
    return LOSSES[kind](pred, target)


# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence, grads: Sequence, state: AdamState):
    """One in-place ADAM update of ``params`` (Tensors or arrays); returns them."""
    if len(params) != len(grads):
        raise ShapeMismatch("adam_step needs one gradient per parameter")
    if not state.m:
        state.m = [np.zeros_like(_arr(p)) for p in params]
        state.v = [np.zeros_like(_arr(p)) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        theta = _arr(p)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient {g.shape} for parameter {theta.shape}")
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= step.astype(theta.dtype, copy=False)
    return params


def _arr(p):
    return p.data if isinstance(p, Tensor) else p


class Adam:
    """ADAM over a fixed list of trainable tensors, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


# verification


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], h=1e-4,
                      samples: int | None = None, seed=0, signature=None):
    """Compare tape gradients with central differences.

    ``f`` rebuilds the scalar graph from the current parameter values.  With
    ``samples`` set, only that many randomly chosen entries per tensor are
    perturbed.  ``signature`` returns the piecewise branch the graph is on
    (e.g. max-pool winners); entries whose +h or -h perturbation changes it
    straddle a kink, where central differences are meaningless, and are skipped.

    Returns (worst relative error, entries compared, entries skipped).
    """
    if h <= 0:
        raise InvalidConfig("finite-difference step must be positive")
    for p in params:
        p.grad = None
    out = f()
    _check_finite(out.data, "grad_check objective")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    base = signature() if signature else None
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = rng.choice(flat.size, samples, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = float(_check_finite(f().data, "grad_check objective"))
            kink = signature is not None and not np.array_equal(signature(), base)
            flat[k] = orig - h
            fm = float(_check_finite(f().data, "grad_check objective"))
            kink = kink or (signature is not None and not np.array_equal(signature(), base))
            flat[k] = orig
            if kink:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(a.reshape(-1)[k])
            err = abs(ana - num) / max(abs(ana) + abs(num), 1e-8)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h=1e-4,
               samples: int | None = None, seed=0, signature=None) -> float:
    """Largest relative gap between tape gradients and central differences."""
    return grad_check_report(f, params, h, samples, seed, signature)[0]


# initialization


def xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_lstm(rng, n_in, hidden, dtype=np.float32) -> LSTMParams:
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return LSTMParams(
        parameter(xavier_uniform(rng, (n_in, 4 * hidden), n_in, 4 * hidden, dtype), dtype),
        parameter(xavier_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype), dtype),
        parameter(b, dtype),
    )


# checkpoint container

MAGIC = b"DAE1"
FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


def encode_tensors(named: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named))]
    for name, arr in named.items():
        arr = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(raw: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpoint("checkpoint truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint("tensor name is not UTF-8") from exc
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise CorruptCheckpoint(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).copy()
    if pos != len(raw):
        raise CorruptCheckpoint(f"{len(raw) - pos} trailing bytes after last tensor")
    return out


def save_tensors(path, named: Mapping[str, np.ndarray]) -> None:
    try:
        Path(path).write_bytes(encode_tensors(named))
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc
    return decode_tensors(raw)
