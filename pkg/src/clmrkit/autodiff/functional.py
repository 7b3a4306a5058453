"""Neural-network operations with hand-written backward rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, ShapeMismatch
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, L] with ``weight`` [C_out, C_in, K]."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-d input and weight, got {x.shape}, {weight.shape}")
    batch, c_in, length = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ShapeMismatch(f"input has {c_in} channels, weight expects {w_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    padded_len = length + 2 * padding
    if padded_len < k:
        raise ShapeMismatch(f"input length {length} (+{2 * padding} padding) shorter than kernel {k}")
    l_out = (padded_len - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :l_out]  # B, C, L_out, K
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(batch * l_out, c_in * k)
    w_mat = weight.data.reshape(c_out, c_in * k)
    out = cols @ w_mat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(batch, l_out, c_out).transpose(0, 2, 1))

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * l_out, c_out)
        grad_w = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        grad_b = g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype) if bias is not None else None
        grad_x = None
        if x.requires_grad:
            dcols = (g2 @ w_mat).reshape(batch, l_out, c_in, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            span = stride * (l_out - 1) + 1
            for tap in range(k):
                dxp[:, :, tap:tap + span:stride] += dcols[:, :, :, tap].transpose(0, 2, 1)
            grad_x = dxp[:, :, padding:padding + length] if padding else dxp
        return (grad_x, grad_w, grad_b)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor._from_op(out, parents, backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (not trained by gradient)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool = True) -> Tensor:
    """Per-channel normalisation of ``x`` [B, C, L] over batch and length."""
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm1d input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    batch, channels, length = x.shape
    m = batch * length
    g_ = gamma.data[None, :, None]
    b_ = beta.data[None, :, None]
    if training:
        if m < 2:
            raise DegenerateBatch(f"batch statistics need at least 2 values per channel, got {m}")
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=(0, 2))
        var = x64.var(axis=(0, 2))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * m / (m - 1)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = ((x64 - mean[None, :, None]) * inv_std[None, :, None]).astype(x.dtype)
        out = xhat * g_ + b_

        def backward(g):
            g64 = g.astype(np.float64)
            grad_gamma = (g64 * xhat).sum(axis=(0, 2)).astype(g.dtype)
            grad_beta = g64.sum(axis=(0, 2)).astype(g.dtype)
            dxhat = g64 * gamma.data[None, :, None]
            sum_d = dxhat.sum(axis=(0, 2))[None, :, None]
            sum_dx = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
            grad_x = (inv_std[None, :, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)
            return (grad_x.astype(g.dtype), grad_gamma, grad_beta)
    else:
        inv_std = (1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps))
        scale = (gamma.data * inv_std).astype(x.dtype)[None, :, None]
        xhat = ((x.data - state.running_mean[None, :, None]) * inv_std[None, :, None]).astype(x.dtype)
        out = xhat * g_ + b_

        def backward(g):
            return (g * scale,
                    (g * xhat).sum(axis=(0, 2), dtype=np.float64).astype(g.dtype),
                    g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype))

    return Tensor._from_op(out.astype(x.dtype), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def maxpool1d(x: Tensor, pool: int = 3) -> Tensor:
    """Non-overlapping max pooling; ties go to the lowest index, remainder dropped."""
    if x.ndim != 3:
        raise ShapeMismatch(f"maxpool1d expects [B, C, L], got {x.shape}")
    batch, channels, length = x.shape
    l_out = length // pool
    if l_out == 0:
        raise ShapeMismatch(f"length {length} shorter than pool {pool}")
    blocks = x.data[:, :, :l_out * pool].reshape(batch, channels, l_out, pool)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def backward(g):
        grad = np.zeros((batch, channels, l_out, pool), dtype=g.dtype)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=3)
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :l_out * pool] = grad.reshape(batch, channels, l_out * pool)
        return (full,)

    return Tensor._from_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} vs weight {weight.shape}")
    out = x @ weight.T
    return out + bias if bias is not None else out


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, L] -> [B, C] by averaging over length."""
    if x.ndim != 3:
        raise ShapeMismatch(f"global_avg_pool expects [B, C, L], got {x.shape}")
    return x.mean(axis=2)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._from_op(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray,
                                     mask: np.ndarray | None = None) -> Tensor:
    """Mean element-wise BCE of ``sigmoid(logits)`` against binary ``targets``.

    ``mask`` (same shape, 0/1) excludes entries from the mean.
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeMismatch(f"targets {t.shape} vs logits {z.shape}")
    w = np.ones_like(z) if mask is None else np.asarray(mask, dtype=z.dtype)
    count = max(float(w.sum()), 1.0)
    # log(1 + exp(-|z|)) form avoids overflow
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((per * w).sum(dtype=np.float64) / count, dtype=z.dtype)
    return Tensor._from_op(out, (logits,), lambda g: (g * (_sigmoid(z) - t) * w / count,))
