"""Forward and backward kernels for the fixed layer menu.

All kernels are dtype-preserving: float32 parameters and inputs stay float32,
float64 stays float64 (the gradient checks rely on this).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k):
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # (B, C, H, W, k, k) -> (B, H, W, C, k, k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    b, c, h, w = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * k * k)


def conv_forward(x, weight, bias, k):
    b, _, h, w = x.shape
    cols = _im2col(x, k)
    out = cols @ weight.T + bias
    out = out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv_backward(dout, cols, x_shape, weight, k, need_dx=True):
    b, c, h, w = x_shape
    o = weight.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(b * h * w, o)
    dweight = dflat.T @ cols
    dbias = dflat.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    dcols = (dflat @ weight).reshape(b, h, w, c, k, k)
    p = k // 2
    dx = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx, dweight, dbias


def pool_forward(x, s):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // s, w // s, s * s)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def pool_backward(dout, arg, x_shape, s):
    b, c, h, w = x_shape
    dwin = np.zeros((b, c, h // s, w // s, s * s), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(b, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def act_forward(x, kind):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    return x


def act_backward(dout, x, y, kind):
    if kind == "relu":
        return dout * (x > 0)
    if kind == "tanh":
        return dout * (1 - y * y)
    return dout


def softmax(logits, temperature=1.0):
    z = logits / temperature if temperature != 1.0 else logits
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature=1.0):
    z = logits / temperature if temperature != 1.0 else logits
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
