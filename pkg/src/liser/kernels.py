"""Hot inner loops of the tensor engine.

Every kernel exists twice: a numba ``@njit`` loop (``nb_*``) and a vectorised
numpy version (``np_*``). The unprefixed names are bound to one of them at
import time according to ``LISER_NUMBA``. Both paths are exact up to the
last ulp of ``tanh`` and summation order; max-pool and the im2col pair are
bit-identical.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------- im2col pair

def np_im2col(xp, kh, kw):
    n, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n,c,h,w,kh,kw
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * kh * kw)


def np_col2im(cols, n, c, hp, wp, kh, kw):
    h, w = hp - kh + 1, wp - kw + 1
    blocks = cols.reshape(n, h, w, c, kh, kw)
    out = np.zeros((n, c, hp, wp))
    # reversed offsets reproduce the row-major accumulation order of nb_col2im
    for i in range(kh - 1, -1, -1):
        for j in range(kw - 1, -1, -1):
            out[:, :, i:i + h, j:j + w] += blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


@njit(cache=True)
def nb_im2col(xp, kh, kw):
    n, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    cols = np.empty((n * h * w, c * kh * kw))
    for b in range(n):
        for y in range(h):
            for x in range(w):
                row = (b * h + y) * w + x
                for ch in range(c):
                    base = ch * kh * kw
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, base + i * kw + j] = xp[b, ch, y + i, x + j]
    return cols


@njit(cache=True)
def nb_col2im(cols, n, c, hp, wp, kh, kw):
    h, w = hp - kh + 1, wp - kw + 1
    out = np.zeros((n, c, hp, wp))
    for b in range(n):
        for y in range(h):
            for x in range(w):
                row = (b * h + y) * w + x
                for ch in range(c):
                    base = ch * kh * kw
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ch, y + i, x + j] += cols[row, base + i * kw + j]
    return out


# ------------------------------------------------------------------- maxpool

def np_maxpool_forward(x, ph, pw):
    n, c, h, w = x.shape
    ho, wo = h // ph, w // pw
    win = x[:, :, :ho * ph, :wo * pw].reshape(n, c, ho, ph, wo, pw)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def np_maxpool_backward(grad, arg, h, w, ph, pw):
    n, c, ho, wo = grad.shape
    win = np.zeros((n, c, ho, wo, ph * pw))
    np.put_along_axis(win, arg[..., None], grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((n, c, h, w))
    dx[:, :, :ho * ph, :wo * pw] = win.reshape(n, c, ho * ph, wo * pw)
    return dx


@njit(cache=True)
def nb_maxpool_forward(x, ph, pw):
    n, c, h, w = x.shape
    ho, wo = h // ph, w // pw
    out = np.empty((n, c, ho, wo))
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x0 in range(wo):
                    best = x[b, ch, y * ph, x0 * pw]
                    k = 0
                    for i in range(ph):
                        for j in range(pw):
                            v = x[b, ch, y * ph + i, x0 * pw + j]
                            if v > best:
                                best = v
                                k = i * pw + j
                    out[b, ch, y, x0] = best
                    arg[b, ch, y, x0] = k
    return out, arg


@njit(cache=True)
def nb_maxpool_backward(grad, arg, h, w, ph, pw):
    n, c, ho, wo = grad.shape
    dx = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for x0 in range(wo):
                    k = arg[b, ch, y, x0]
                    dx[b, ch, y * ph + k // pw, x0 * pw + k % pw] = grad[b, ch, y, x0]
    return dx


# ---------------------------------------------------------------- batch norm

def np_bn_stats(x):
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


def np_bn_apply(x, mu, invstd, gamma, beta):
    s = (1, -1, 1, 1)
    xhat = (x - mu.reshape(s)) * invstd.reshape(s)
    return xhat, xhat * gamma.reshape(s) + beta.reshape(s)


def np_bn_backward(g, xhat, gamma, invstd, training):
    axes = (0, 2, 3)
    s = (1, -1, 1, 1)
    ggamma = (g * xhat).sum(axis=axes)
    gbeta = g.sum(axis=axes)
    scale = (gamma * invstd).reshape(s)
    if not training:
        return g * scale, ggamma, gbeta
    m = g.size // g.shape[1]
    gx = scale * (g - gbeta.reshape(s) / m - xhat * (ggamma.reshape(s) / m))
    return gx, ggamma, gbeta


@njit(cache=True)
def nb_bn_stats(x):
    n, c, h, w = x.shape
    m = n * h * w
    mu = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for b in range(n):
            for y in range(h):
                for k in range(w):
                    acc += x[b, ch, y, k]
        mu[ch] = acc / m
        acc = 0.0
        for b in range(n):
            for y in range(h):
                for k in range(w):
                    d = x[b, ch, y, k] - mu[ch]
                    acc += d * d
        var[ch] = acc / m
    return mu, var


@njit(cache=True)
def nb_bn_apply(x, mu, invstd, gamma, beta):
    n, c, h, w = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for k in range(w):
                    v = (x[b, ch, y, k] - mu[ch]) * invstd[ch]
                    xhat[b, ch, y, k] = v
                    out[b, ch, y, k] = v * gamma[ch] + beta[ch]
    return xhat, out


@njit(cache=True)
def nb_bn_backward(g, xhat, gamma, invstd, training):
    n, c, h, w = g.shape
    m = n * h * w
    ggamma = np.zeros(c)
    gbeta = np.zeros(c)
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for k in range(w):
                    ggamma[ch] += g[b, ch, y, k] * xhat[b, ch, y, k]
                    gbeta[ch] += g[b, ch, y, k]
    gx = np.empty_like(g)
    for b in range(n):
        for ch in range(c):
            sc = gamma[ch] * invstd[ch]
            for y in range(h):
                for k in range(w):
                    if training:
                        gx[b, ch, y, k] = sc * (g[b, ch, y, k] - gbeta[ch] / m
                                                - xhat[b, ch, y, k] * (ggamma[ch] / m))
                    else:
                        gx[b, ch, y, k] = sc * g[b, ch, y, k]
    return gx, ggamma, gbeta


# ----------------------------------------------------------------- LSTM cell

def _np_sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def np_lstm_cell_forward(z, c_prev):
    hid = c_prev.shape[1]
    gates = np.empty_like(z)
    gates[:, :hid] = _np_sigmoid(z[:, :hid])
    gates[:, hid:2 * hid] = _np_sigmoid(z[:, hid:2 * hid])
    gates[:, 2 * hid:3 * hid] = np.tanh(z[:, 2 * hid:3 * hid])
    gates[:, 3 * hid:] = _np_sigmoid(z[:, 3 * hid:])
    i, f, g, o = gates[:, :hid], gates[:, hid:2 * hid], gates[:, 2 * hid:3 * hid], gates[:, 3 * hid:]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, gates


def np_lstm_cell_backward(dh, dc_next, gates, c, c_prev):
    hid = c.shape[1]
    i, f, g, o = gates[:, :hid], gates[:, hid:2 * hid], gates[:, 2 * hid:3 * hid], gates[:, 3 * hid:]
    tc = np.tanh(c)
    dc = dc_next + dh * o * (1.0 - tc * tc)
    dz = np.empty_like(gates)
    dz[:, :hid] = dc * g * i * (1.0 - i)
    dz[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
    dz[:, 2 * hid:3 * hid] = dc * i * (1.0 - g * g)
    dz[:, 3 * hid:] = dh * tc * o * (1.0 - o)
    return dz, dc * f


@njit(cache=True)
def nb_lstm_cell_forward(z, c_prev):
    n, hid = c_prev.shape
    gates = np.empty_like(z)
    h = np.empty((n, hid))
    c = np.empty((n, hid))
    for b in range(n):
        for k in range(hid):
            i = 0.5 * (1.0 + np.tanh(0.5 * z[b, k]))
            f = 0.5 * (1.0 + np.tanh(0.5 * z[b, hid + k]))
            g = np.tanh(z[b, 2 * hid + k])
            o = 0.5 * (1.0 + np.tanh(0.5 * z[b, 3 * hid + k]))
            gates[b, k] = i
            gates[b, hid + k] = f
            gates[b, 2 * hid + k] = g
            gates[b, 3 * hid + k] = o
            ck = f * c_prev[b, k] + i * g
            c[b, k] = ck
            h[b, k] = o * np.tanh(ck)
    return h, c, gates


@njit(cache=True)
def nb_lstm_cell_backward(dh, dc_next, gates, c, c_prev):
    n, hid = c.shape
    dz = np.empty_like(gates)
    dc_prev = np.empty((n, hid))
    for b in range(n):
        for k in range(hid):
            i = gates[b, k]
            f = gates[b, hid + k]
            g = gates[b, 2 * hid + k]
            o = gates[b, 3 * hid + k]
            tc = np.tanh(c[b, k])
            dc = dc_next[b, k] + dh[b, k] * o * (1.0 - tc * tc)
            dz[b, k] = dc * g * i * (1.0 - i)
            dz[b, hid + k] = dc * c_prev[b, k] * f * (1.0 - f)
            dz[b, 2 * hid + k] = dc * i * (1.0 - g * g)
            dz[b, 3 * hid + k] = dh[b, k] * tc * o * (1.0 - o)
            dc_prev[b, k] = dc * f
    return dz, dc_prev


if USE_NUMBA:
    im2col, col2im = nb_im2col, nb_col2im
    maxpool_forward, maxpool_backward = nb_maxpool_forward, nb_maxpool_backward
    lstm_cell_forward, lstm_cell_backward = nb_lstm_cell_forward, nb_lstm_cell_backward
    bn_stats, bn_apply, bn_backward = nb_bn_stats, nb_bn_apply, nb_bn_backward
else:
    im2col, col2im = np_im2col, np_col2im
    maxpool_forward, maxpool_backward = np_maxpool_forward, np_maxpool_backward
    lstm_cell_forward, lstm_cell_backward = np_lstm_cell_forward, np_lstm_cell_backward
    bn_stats, bn_apply, bn_backward = np_bn_stats, np_bn_apply, np_bn_backward

BACKEND = "numba" if USE_NUMBA else "numpy"
