"""Layer primitives on (N, C, H, W) float64 arrays, each with an explicit backward.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------- convolution


def conv2d_same_forward(x, w, b):
    """Zero-padded cross-correlation; output H, W equal input H, W.

    ``w`` is (C_out, C_in, k, k) with odd k (3 for the body, 1 for the head).
    """
    _check4(x)
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv kernel must be square and odd, got {kh}x{kw}")
    p = kh // 2
    if p:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.stack(
            [xp[:, :, i : i + h, j : j + wd] for i in range(kh) for j in range(kw)], axis=2
        ).reshape(n, c * kh * kw, h * wd)
    else:
        cols = x.reshape(n, c, h * wd)
    out = np.matmul(w.reshape(o, -1), cols) + b[None, :, None]
    return out.reshape(n, o, h, wd), (x.shape, cols, w)


def conv2d_same_backward(dy, cache):
    xshape, cols, w = cache
    n, c, h, wd = xshape
    o, _, k, _ = w.shape
    dyr = dy.reshape(n, o, h * wd)
    dw = np.matmul(dyr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dyr.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, dyr)
    p = k // 2
    if not p:
        return dcols.reshape(xshape), dw, db
    dcols = dcols.reshape(n, c, k, k, h, wd)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
    return dxp[:, :, p : p + h, p : p + wd], dw, db


# ------------------------------------------------------------ normalization


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, eps=1e-5, momentum=0.1, update=True):
    """Per-channel batch normalization over (N, H, W).

    In train mode the running statistics are updated in place (unbiased
    variance) unless ``update`` is False.
    """
    _check4(x)
    if gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm has {gamma.shape[0]} channels, input has {x.shape[1]}")
    if train:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update:
            m = x.size // x.shape[1]
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * (var * m / (m - 1) if m > 1 else var)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma)


def batchnorm_backward(dy, cache):
    """Train-mode backward (batch statistics depend on the input)."""
    xhat, inv_std, gamma = cache
    m = xhat.size // xhat.shape[1]
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    dx = (
        inv_std[None, :, None, None]
        / m
        * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
        )
    )
    return dx, dgamma, dbeta


# ------------------------------------------------------------------ pointwise


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


# -------------------------------------------------------------------- pooling


def maxpool2_forward(x):
    """2x2 / stride-2 max pooling; the cache records the arg-max in each window."""
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even H and W, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dy, cache):
    shape, idx = cache
    n, c, h, w = shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


# ------------------------------------------------------------------ upsampling


def tconv2_forward(x, w, b):
    """2x2 transposed convolution with stride 2; ``w`` is (C_in, C_out, 2, 2)."""
    _check4(x)
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[2:] != (2, 2):
        raise ShapeError(f"tconv kernel {w.shape} does not fit input with {c} channels")
    o = w.shape[1]
    y = np.tensordot(x, w, axes=([1], [0]))  # n, h, w, o, a, b
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    return y + b[None, :, None, None], (x, w)


def tconv2_backward(dy, cache):
    x, w = cache
    n, c, h, wd = x.shape
    o = w.shape[1]
    dyr = dy.reshape(n, o, h, 2, wd, 2)
    dx = np.tensordot(dyr, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, dyr, axes=([0, 2, 3], [0, 2, 4]))
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def conv_down2(y, w):
    """Stride-2 2x2 correlation with a tconv kernel: the adjoint of :func:`tconv2_forward` (no bias)."""
    n, o, h2, w2 = y.shape
    yr = y.reshape(n, o, h2 // 2, 2, w2 // 2, 2)
    return np.tensordot(yr, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------- skips


def concat_skip(encoder_fm, decoder_fm):
    """Channel concatenation, encoder channels first. No cropping is ever done."""
    if encoder_fm.shape[0] != decoder_fm.shape[0] or encoder_fm.shape[2:] != decoder_fm.shape[2:]:
        raise ShapeError(f"skip connection mismatch: encoder {encoder_fm.shape} vs decoder {decoder_fm.shape}")
    return np.concatenate([encoder_fm, decoder_fm], axis=1)


def split_skip(dy, n_encoder: int):
    return dy[:, :n_encoder], dy[:, n_encoder:]


# ---------------------------------------------------------------- soft-max


def softmax_pixelwise(scores):
    """Soft-max across the class axis at every pixel (max-shifted)."""
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
