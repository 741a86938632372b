"""Array-level forward/backward primitives for the voicing model.

Convolutions act along the frequency axis only (all kernels are 1 in time),
so frame count is preserved everywhere. Convolutional activations are laid
out channels-last as [batch, time, freq, channel], which turns each kernel
tap into one matrix product; recurrent/head stages use [batch, time,
feature]. Every forward returns (output, cache); the matching backward
consumes the cache and returns input/parameter gradients.
"""
from __future__ import annotations

import numpy as np


def conv_freq_out_size(f: int, kernel: int, stride: int, pad: int) -> int:
    return (f + 2 * pad - kernel) // stride + 1


def _im2col(xp, k: int, stride: int, fo: int):
    """[B, T, Fp, C] -> [B, T, Fo, K*C] tap-major columns."""
    b, t, _, c = xp.shape
    span = (fo - 1) * stride + 1
    cols = np.empty((b, t, fo, k * c), dtype=xp.dtype)
    for j in range(k):
        cols[..., j * c : (j + 1) * c] = xp[:, :, j : j + span : stride, :]
    return cols


def conv_freq_forward(x, w, b, stride: int, pad: int):
    """Convolution with a 1 x K (time x freq) kernel as one matrix product.

    x: [B, T, F, C]; w: [K, C, O]; b: [O] -> y: [B, T, Fo, O]
    """
    f = x.shape[2]
    k, c, o = w.shape
    fo = conv_freq_out_size(f, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else x
    cols = _im2col(xp, k, stride, fo)
    y = cols.reshape(-1, k * c) @ w.reshape(k * c, o)
    y = y.reshape(*cols.shape[:3], o)
    y += b
    cache = (xp, f, w, stride, pad)
    return y, cache


def conv_freq_backward(dy, cache):
    """Returns (dx, dw, db) for conv_freq_forward.

    Columns are rebuilt from the cached (padded) input rather than cached,
    keeping activation memory proportional to the input.
    """
    xp, f_in, w, stride, pad = cache
    k, c, o = w.shape
    fo = dy.shape[2]
    span = (fo - 1) * stride + 1
    dy2 = dy.reshape(-1, o)
    cols = _im2col(xp, k, stride, fo)
    dw = (cols.reshape(-1, k * c).T @ dy2).reshape(k, c, o)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(k * c, o).T).reshape(*dy.shape[:3], k * c)
    dxp = np.zeros_like(xp)
    for j in range(k):
        dxp[:, :, j : j + span : stride, :] += dcols[..., j * c : (j + 1) * c]
    dx = dxp[:, :, pad : pad + f_in, :] if pad else dxp
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      momentum: float, eps: float, training: bool,
                      update_stats: bool):
    """Per-channel batch norm over (batch, time, freq) of a [B,T,F,C] tensor.

    Training mode normalizes with batch statistics; update_stats additionally
    folds them into the running averages (in place). Inference mode uses the
    running statistics and is batch-size independent.
    """
    if training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    cache = (xhat, gamma, inv_std, training)
    return y, cache


def batchnorm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, gamma, inv_std, training = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.size // dy.shape[-1]
    sum_dxhat = dxhat.sum(axis=axes)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)
    dx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def elu_forward(x):
    y = x.copy()
    np.expm1(y, out=y, where=y < 0)
    return y, y


def elu_backward(dy, y):
    return dy * np.where(y > 0, 1.0, y + 1.0)


def sigmoid(x):
    # exp of the negative magnitude never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gated_conv_forward(u, w1, b1, w2, b2, stride: int, pad: int):
    """Gated convolution v = (u*W1 + b1) (.) sigmoid(u*W2 + b2).

    The input is padded once and shared by both convolution paths.
    """
    up = np.pad(u, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else u
    m1, c1 = conv_freq_forward(up, w1, b1, stride, 0)
    m2, c2 = conv_freq_forward(up, w2, b2, stride, 0)
    s2 = sigmoid(m2)
    v = m1 * s2
    cache = (m1, s2, c1, c2, pad, u.shape[2])
    return v, cache


def gated_conv_backward(dv, cache):
    """Gradient of the masked convolution:
    d(m1 (.) sigma(m2)) = dm1 (.) sigma(m2) + sigma'(m2) dm2 (.) m1,
    chained through both convolutions.

    Returns (du, dw1, db1, dw2, db2).
    """
    if cache is None:
        raise ValueError("gated_conv_backward needs the forward cache")
    m1, s2, c1, c2, pad, f_in = cache
    dm1 = dv * s2
    dm2 = dv * m1 * s2 * (1.0 - s2)
    du1, dw1, db1 = conv_freq_backward(dm1, c1)
    du2, dw2, db2 = conv_freq_backward(dm2, c2)
    du = du1 + du2
    if pad:
        du = du[:, :, pad : pad + f_in, :]
    return du, dw1, db1, dw2, db2


def linear_forward(x, w, b):
    """x: [..., D]; w: [D, O]; b: [O]."""
    y = x @ w + b
    return y, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    d, o = w.shape
    dw = x.reshape(-1, d).T @ dy.reshape(-1, o)
    db = dy.reshape(-1, o).sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def layer_norm_forward(x, gain, offset, eps: float):
    """Normalization over the last (feature) axis of [B, T, D]."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gain * xhat + offset
    return y, (xhat, gain, inv_std)


def layer_norm_backward(dy, cache):
    xhat, gain, inv_std = cache
    d = dy.shape[-1]
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    doffset = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = (inv_std / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, doffset
