"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the student network needs are provided. Operations are
recorded on the innermost active :class:`Tape`; outside a tape nothing is
recorded and ops run as plain numpy.

    with Tape() as tape:
        loss = (x * w).sum()
    (gw,) = tape.backward(loss, [w])
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return div_const(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------- tape

class Node(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


_TAPES: list = []


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._entered = False

    def __enter__(self):
        self._entered = True
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors the loss does not depend on get an exact zero gradient.
        """
        if not self._entered:
            raise RuntimeError("backward called before any forward pass was recorded")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _record(op, inputs, out_data, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].record(op, tuple(inputs), out, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def div_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("div_const", (a,), a.data / c, lambda g: (g / c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.maximum(a.data, 0.0), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", (a,), out, back)


# ------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inv),))


def take_rows(a, idx) -> Tensor:
    """Rows ``idx`` of ``a`` along axis 0."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", (a,), a.data[idx], back)


# -------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _record("linear", (x, weight, bias), out, back)


# ------------------------------------------------------------------- softmax

def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{op}: non-finite input")


def softmax(logits) -> Tensor:
    """Softmax along the last axis, with max subtraction."""
    x = as_tensor(logits)
    _check_finite(x.data, "softmax")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), p, back)


def log_softmax(logits) -> Tensor:
    x = as_tensor(logits)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, back)


# ---------------------------------------------------------------------- conv

def conv2d(x, weight, bias) -> Tensor:
    """Stride-1 same-padded 2-D convolution (cross-correlation).

    x: N x C_in x H x W (or C_in x H x W), weight: C_out x C_in x kh x kw.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, cin, h, w = xd.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel ({kh},{kw}) must have odd dims for same padding")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = kernels.im2col(xp, kh, kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def back(g):
        gd = g[None] if squeeze else g
        gmat = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = gmat.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxp = kernels.col2im(gmat @ wmat, n, cin, h + 2 * ph, w + 2 * pw, kh, kw)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
            gx = gx[0] if squeeze else np.ascontiguousarray(gx)
        return gx, gw, gb

    return _record("conv2d", (x, weight, bias), out, back)


def maxpool2d(x, pool) -> Tensor:
    """Non-overlapping max pool; trailing remainders are dropped, ties go to the first max."""
    x = as_tensor(x)
    ph, pw = pool
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    h, w = xd.shape[2], xd.shape[3]
    if ph < 1 or pw < 1:
        raise ValueError("maxpool2d: pool dims must be >= 1")
    if ph > h or pw > w:
        raise ValueError(f"maxpool2d: pool {pool} larger than input {h}x{w}")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(xd), ph, pw)

    def back(g):
        gd = g[None] if squeeze else g
        dx = kernels.maxpool_backward(np.ascontiguousarray(gd), arg, h, w, ph, pw)
        return (dx[0] if squeeze else dx,)

    return _record("maxpool2d", (x,), out[0] if squeeze else out, back)


def batchnorm2d(x, gamma, beta, training: bool, running_mean=None, running_var=None,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over N, H, W.

    In training mode the running arrays, when given, are updated in place
    (running variance uses the unbiased batch variance).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ValueError(f"batchnorm2d: shape mismatch {x.shape} vs gamma {gamma.shape}")
    xd = np.ascontiguousarray(x.data)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("batchnorm2d: training mode needs at least 2 values per channel")
        mu, var = kernels.bn_stats(xd)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat, out = kernels.bn_apply(xd, mu, invstd, gamma.data, beta.data)

    def back(g):
        return kernels.bn_backward(np.ascontiguousarray(g), xhat, gamma.data, invstd, training)

    return _record("batchnorm2d", (x, gamma, beta), out, back)


# ---------------------------------------------------------------------- lstm

class LSTMStates(NamedTuple):
    hs: np.ndarray  # N x T x H
    cs: np.ndarray  # N x T x H


def lstm(x, w_ih, w_hh, b_ih, b_hh):
    """Single-layer LSTM from zero initial state, gate order (i, f, g, o).

    x is N x T x D (or T x D). Returns the final hidden state as a tensor
    plus the per-step hidden and cell states as plain arrays.
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    n, steps, d = xd.shape
    hid = w_hh.shape[1]
    if steps < 1:
        raise ValueError("lstm: need at least one time step")
    if w_ih.shape != (4 * hid, d):
        raise ValueError(f"lstm: w_ih shape {w_ih.shape} != {(4 * hid, d)}")
    xw = (xd.reshape(n * steps, d) @ w_ih.data.T).reshape(n, steps, 4 * hid) + b_ih.data + b_hh.data
    hs = np.empty((n, steps, hid))
    cs = np.empty((n, steps, hid))
    gates = np.empty((n, steps, 4 * hid))
    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    for t in range(steps):
        z = xw[:, t] + h @ w_hh.data.T
        h, c, gates[:, t] = kernels.lstm_cell_forward(np.ascontiguousarray(z), c)
        hs[:, t] = h
        cs[:, t] = c

    def back(g):
        dh = (g[None] if squeeze else g).copy()
        dc = np.zeros((n, hid))
        dz_all = np.empty((n, steps, 4 * hid))
        gw_hh = np.zeros_like(w_hh.data)
        zeros = np.zeros((n, hid))
        for t in range(steps - 1, -1, -1):
            c_prev = cs[:, t - 1] if t > 0 else zeros
            dz, dc = kernels.lstm_cell_backward(dh, dc, np.ascontiguousarray(gates[:, t]),
                                                np.ascontiguousarray(cs[:, t]),
                                                np.ascontiguousarray(c_prev))
            dz_all[:, t] = dz
            if t > 0:
                gw_hh += dz.T @ hs[:, t - 1]
            dh = dz @ w_hh.data
        flat = dz_all.reshape(n * steps, 4 * hid)
        gx = (flat @ w_ih.data).reshape(n, steps, d) if x.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        gw_ih = flat.T @ xd.reshape(n * steps, d)
        gb = flat.sum(axis=0)
        return gx, gw_ih, gw_hh, gb, gb.copy()

    h_last = hs[:, -1].copy()
    out = _record("lstm", (x, w_ih, w_hh, b_ih, b_hh), h_last[0] if squeeze else h_last, back)
    states = LSTMStates(hs[0], cs[0]) if squeeze else LSTMStates(hs, cs)
    return out, states
