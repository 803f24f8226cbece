"""Channels-first dense array operations used by the network forward pass.

All feature maps are ``(C, H, W)`` float32 arrays. Convolutions accumulate one
GEMM per kernel tap in a fixed order, so results do not depend on threading.
"""

from __future__ import annotations

import numpy as np

# a group whose spread is below this fraction of its largest magnitude counts as
# constant; a relative test keeps normalization exactly scale-invariant
GN_FLAT_RTOL = 1e-6


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, dilation: int = 1) -> np.ndarray:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    ``w`` has shape ``(out, in, k, k)`` with odd ``k``.
    """
    c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    p = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1), dtype=np.float32)
    out = np.zeros((o, h * wd), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            y0, x0 = ky * dilation, kx * dilation
            patch = xp[:, y0 : y0 + h, x0 : x0 + wd].reshape(c, h * wd)
            out += taps[ky, kx] @ patch
    out = out.reshape(o, h, wd)
    if b is not None:
        out += b[:, None, None]
    return out


def conv_transpose2x2(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Transposed convolution with a 2x2 kernel and stride 2; ``w`` is ``(in, out, 2, 2)``."""
    c, h, wd = x.shape
    ci, o = w.shape[:2]
    if ci != c or w.shape[2:] != (2, 2):
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    flat = x.reshape(c, h * wd)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0), dtype=np.float32)
    out = np.empty((o, 2 * h, 2 * wd), dtype=np.float32)
    for ky in range(2):
        for kx in range(2):
            out[:, ky::2, kx::2] = (taps[ky, kx] @ flat).reshape(o, h, wd)
    if b is not None:
        out += b[:, None, None]
    return out


def maxpool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial shape {(h, w)} not divisible by 2")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def group_count(channels: int, requested: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``requested``."""
    for g in range(min(requested, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def group_norm_core(x: np.ndarray, groups: int) -> np.ndarray:
    """Normalize each channel group to zero mean / unit variance (no affine).

    Constant groups map to zero instead of being guarded by an additive epsilon.
    """
    c = x.shape[0]
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    g = x.reshape(groups, -1).astype(np.float64)
    mean = g.mean(axis=1, keepdims=True)
    var = g.var(axis=1, keepdims=True)
    flat = var <= (GN_FLAT_RTOL * np.abs(g).max(axis=1, keepdims=True)) ** 2
    out = (g - mean) / np.sqrt(np.where(flat, 1.0, var))
    out[flat[:, 0]] = 0.0
    return out.reshape(x.shape).astype(np.float32)


def group_norm(x, groups, gamma, beta):
    y = group_norm_core(x, groups)
    return y * gamma[:, None, None] + beta[:, None, None]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate(x: np.ndarray) -> np.ndarray:
    """Sigmoid kept strictly inside (0, 1) even where the float type saturates."""
    y = sigmoid(x)
    lo = np.finfo(y.dtype).tiny
    hi = np.nextafter(np.array(1, y.dtype), np.array(0, y.dtype))
    return np.clip(y, lo, hi)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)
