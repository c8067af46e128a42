"""Minimal conv-net primitives on numpy arrays (NHWC, float64).

Convolutions are 3x3 with padding 1 (or 1x1), lowered to a single BLAS
matmul via im2col; col2im in the backward pass is 9 strided adds, not a
scatter.  No autodiff: each op exposes an explicit backward.
"""

from __future__ import annotations

import numpy as np

KSIZE = 3
PAD = 1


def _out_hw(h: int, w: int, stride: int) -> tuple:
    return (h + 2 * PAD - KSIZE) // stride + 1, (w + 2 * PAD - KSIZE) // stride + 1


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    """(N,Hp,Wp,C) padded input -> (N,ho,wo,3,3,C) patch tensor."""
    n, _, _, c = xp.shape
    col = np.empty((n, ho, wo, KSIZE, KSIZE, c), dtype=xp.dtype)
    for ki in range(KSIZE):
        for kj in range(KSIZE):
            col[:, :, :, ki, kj, :] = xp[:, ki:ki + (ho - 1) * stride + 1:stride,
                                         kj:kj + (wo - 1) * stride + 1:stride, :]
    return col


def _pad(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * PAD, w + 2 * PAD, c), dtype=x.dtype)
    xp[:, PAD:-PAD, PAD:-PAD, :] = x
    return xp


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                    stride: int) -> np.ndarray:
    """x (N,H,W,Cin), w (3,3,Cin,Cout), b (Cout,) -> (N,Ho,Wo,Cout)."""
    n, h, wd, ci = x.shape
    ho, wo = _out_hw(h, wd, stride)
    col = _im2col(_pad(x), ho, wo, stride)
    out = col.reshape(n * ho * wo, KSIZE * KSIZE * ci) @ w.reshape(-1, w.shape[-1])
    out += b
    return out.reshape(n, ho, wo, -1)


def conv3x3_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray,
                     stride: int, need_gx: bool = True) -> tuple:
    """Gradients (gx, gw, gb) of conv3x3_forward; gx may be skipped."""
    n, h, wd, ci = x.shape
    _, ho, wo, co = gout.shape
    g2 = gout.reshape(n * ho * wo, co)
    col = _im2col(_pad(x), ho, wo, stride)
    gw = (col.reshape(n * ho * wo, -1).T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    if not need_gx:
        return None, gw, gb
    gcol = (g2 @ w.reshape(-1, co).T).reshape(n, ho, wo, KSIZE, KSIZE, ci)
    gxp = np.zeros((n, h + 2 * PAD, wd + 2 * PAD, ci), dtype=x.dtype)
    for ki in range(KSIZE):
        for kj in range(KSIZE):
            gxp[:, ki:ki + (ho - 1) * stride + 1:stride,
                kj:kj + (wo - 1) * stride + 1:stride, :] += gcol[:, :, :, ki, kj, :]
    return gxp[:, PAD:-PAD, PAD:-PAD, :], gw, gb


def conv1x1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (N,H,W,Cin), w (Cin,Cout)."""
    return x @ w + b


def conv1x1_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray) -> tuple:
    ci, co = w.shape
    gw = x.reshape(-1, ci).T @ gout.reshape(-1, co)
    gb = gout.reshape(-1, co).sum(axis=0)
    gx = gout @ w.T
    return gx, gw, gb


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, gout: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, gout, 0.0)


# logits are clipped before the nonlinearity so scores stay strictly
# inside (0,1) and ltrb cannot overflow; gradients vanish past the clip
CLS_CLIP = 30.0
REG_CLIP = (-20.0, 12.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    zc = np.clip(z, -CLS_CLIP, CLS_CLIP)
    out = np.empty_like(zc)
    pos = zc >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-zc[pos]))
    ez = np.exp(zc[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(z: np.ndarray, p: np.ndarray, gout: np.ndarray) -> np.ndarray:
    g = gout * p * (1.0 - p)
    return np.where(np.abs(z) < CLS_CLIP, g, 0.0)


def scaled_exp(z: np.ndarray, scale: float) -> np.ndarray:
    return scale * np.exp(np.clip(z, REG_CLIP[0], REG_CLIP[1]))


def scaled_exp_backward(z: np.ndarray, out: np.ndarray,
                        gout: np.ndarray) -> np.ndarray:
    g = gout * out
    return np.where((z > REG_CLIP[0]) & (z < REG_CLIP[1]), g, 0.0)
