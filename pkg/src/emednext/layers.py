"""Direct 3D convolution and friends, with hand-written backward passes.

Tensors are ``(C, D, H, W)`` float64/float32 numpy arrays (no batch axis).
Every ``*_backward`` takes the upstream gradient and the forward inputs and
returns gradients in the same order as the forward arguments.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

NORM_EPS = 1e-5


def _out_size(n: int, stride: int) -> int:
    return -(-n // stride)


def _offsets(k: int):
    return itertools.product(range(k), repeat=3)


def _window(xp: np.ndarray, a: int, b: int, c: int, out_shape, stride: int) -> np.ndarray:
    d, h, w = out_shape
    return xp[:, a : a + stride * (d - 1) + 1 : stride,
              b : b + stride * (h - 1) + 1 : stride,
              c : c + stride * (w - 1) + 1 : stride]


def _check_conv(x, w, groups):
    if x.ndim != 4 or w.ndim != 5:
        raise ValueError(f"expected x (C,D,H,W) and w (O,I,k,k,k), got {x.shape} and {w.shape}")
    c_in = x.shape[0]
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k not in (1, 3):
        raise ValueError(f"kernel must be 1x1x1 or 3x3x3, got {w.shape[2:]}")
    if groups == 1:
        if w.shape[1] != c_in:
            raise ValueError(f"weight expects {w.shape[1]} input channels, input has {c_in}")
    elif groups == c_in:
        if w.shape[0] != c_in or w.shape[1] != 1:
            raise ValueError(f"depthwise weight must be ({c_in}, 1, k, k, k), got {w.shape}")
    else:
        raise ValueError(f"groups must be 1 or {c_in}, got {groups}")
    return k


def conv3d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  stride: int = 1, groups: int = 1) -> np.ndarray:
    """Zero-padded ("same") direct convolution; stride 2 gives ceil(n/2) outputs."""
    k = _check_conv(x, w, groups)
    pad = k // 2
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3) if pad else x
    out_shape = tuple(_out_size(n, stride) for n in x.shape[1:])
    out = np.zeros((w.shape[0],) + out_shape, dtype=np.result_type(x, w))
    for a, bb, c in _offsets(k):
        patch = _window(xp, a, bb, c, out_shape, stride)
        if groups == 1:
            out += np.tensordot(w[:, :, a, bb, c], patch, axes=(1, 0))
        else:
            out += w[:, 0, a, bb, c][:, None, None, None] * patch
    if b is not None:
        out += b[:, None, None, None]
    return out


def conv3d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, groups: int = 1):
    """Gradients (dx, dw, db) of :func:`conv3d_direct`."""
    k = _check_conv(x, w, groups)
    pad = k // 2
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3) if pad else x
    dxp = np.zeros_like(xp, dtype=np.result_type(dout, w))
    dw = np.zeros_like(w, dtype=np.result_type(dout, x))
    out_shape = dout.shape[1:]
    for a, bb, c in _offsets(k):
        patch = _window(xp, a, bb, c, out_shape, stride)
        dpatch = _window(dxp, a, bb, c, out_shape, stride)
        if groups == 1:
            dw[:, :, a, bb, c] = np.tensordot(dout, patch, axes=([1, 2, 3], [1, 2, 3]))
            dpatch += np.tensordot(w[:, :, a, bb, c], dout, axes=(0, 0))
        else:
            dw[:, 0, a, bb, c] = np.sum(dout * patch, axis=(1, 2, 3))
            dpatch += w[:, 0, a, bb, c][:, None, None, None] * dout
    dx = dxp[:, pad : pad + x.shape[1], pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
    return dx, dw, dout.sum(axis=(1, 2, 3))


def conv_transpose2(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """2x2x2 stride-2 transposed convolution; ``w`` is ``(C_in, C_out, 2, 2, 2)``."""
    if w.shape[0] != x.shape[0] or w.shape[2:] != (2, 2, 2):
        raise ValueError(f"transposed conv weight {w.shape} incompatible with input {x.shape}")
    d, h, ww = x.shape[1:]
    out = np.zeros((w.shape[1], 2 * d, 2 * h, 2 * ww), dtype=np.result_type(x, w))
    for a, bb, c in itertools.product(range(2), repeat=3):
        out[:, a::2, bb::2, c::2] = np.tensordot(w[:, :, a, bb, c], x, axes=(0, 0))
    if b is not None:
        out += b[:, None, None, None]
    return out


def conv_transpose2_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = np.zeros_like(x, dtype=np.result_type(dout, w))
    dw = np.zeros_like(w, dtype=np.result_type(dout, x))
    for a, bb, c in itertools.product(range(2), repeat=3):
        g = dout[:, a::2, bb::2, c::2]
        dx += np.tensordot(w[:, :, a, bb, c], g, axes=(1, 0))
        dw[:, :, a, bb, c] = np.tensordot(x, g, axes=([1, 2, 3], [1, 2, 3]))
    return dx, dw, dout.sum(axis=(1, 2, 3))


def channel_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Group norm with one group per channel. Returns (y, cache)."""
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mean) * inv_std
    y = xhat * gamma[:, None, None, None] + beta[:, None, None, None]
    return y, (xhat, inv_std)


def channel_norm_backward(dy: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv_std = cache
    n = xhat[0].size
    dgamma = np.sum(dy * xhat, axis=(1, 2, 3))
    dbeta = dy.sum(axis=(1, 2, 3))
    dxhat = dy * gamma[:, None, None, None]
    sum_dxhat = dxhat.sum(axis=(1, 2, 3), keepdims=True)
    sum_dxhat_xhat = np.sum(dxhat * xhat, axis=(1, 2, 3), keepdims=True)
    dx = inv_std / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (cdf + x * pdf)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
