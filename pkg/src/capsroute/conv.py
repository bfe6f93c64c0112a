"""Convolution, pooling, and batch normalization on BCHW tensors.

Convolutions run as im2col matrix products. "same" padding is symmetric
zero padding with the extra cell on the high side when the deficit is odd;
output size is ceil(in / stride). Pooling with "same" padding excludes the
padded cells (max ignores them, average divides by the in-bounds count).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record


def _out_size(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (output size, pad_low, pad_high) for one spatial axis."""
    if padding == "valid":
        if n < k:
            raise ShapeError(f"window {k} larger than input extent {n}")
        return (n - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-n // stride)  # ceil
        total = max(0, (out - 1) * stride + k - n)
        lo = total // 2
        return out, lo, total - lo
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> (B,C,oH,oW,k,k) strided view."""
    w = sliding_window_view(xp, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """2D convolution (cross-correlation): kernel is (outC, inC, kH, kW)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"input has {C} channels but kernel expects {Ck} (input {x.shape}, kernel {kernel.shape})")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")

    oH, pt, pb = _out_size(H, kh, stride, padding)
    oW, pl, pr = _out_size(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data

    cols = _windows(xp, kh, stride).transpose(0, 2, 3, 1, 4, 5).reshape(B * oH * oW, C * kh * kw)
    kmat = kernel.data.reshape(O, C * kh * kw)
    out_data = (cols @ kmat.T).reshape(B, oH, oW, O).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(out_data))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * oH * oW, O)
        gk = gx = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(B, oH, oW, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oH : stride, j : j + stride * oW : stride] += dcols[..., i, j]
            gx = dxp[:, :, pt : pt + H, pl : pl + W]
        return (gx, gk)

    return record(out, (x, kernel), vjp)


def pool2d(x: Tensor, mode: str, size: int, stride: int, padding: str = "valid") -> Tensor:
    """Max or average pooling. Max routes gradient to the first argmax in

    row-major window order; average distributes uniformly over the cells
    that contributed (padded cells never contribute).
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects 4D input, got {x.shape}")
    if mode not in ("max", "avg"):
        raise ValueError(f"mode must be 'max' or 'avg', got {mode!r}")
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    B, C, H, W = x.shape
    oH, pt, pb = _out_size(H, size, stride, padding)
    oW, pl, pr = _out_size(W, size, stride, padding)
    padded = pt or pb or pl or pr

    if mode == "max":
        fill = -np.inf if padded else 0.0
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=fill) if padded else x.data
        flat = _windows(xp, size, stride).reshape(B, C, oH, oW, size * size)
        idx = flat.argmax(axis=-1)
        out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

        def vjp(g):
            dxp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=x.data.dtype)
            bb, cc, oh, ow = np.indices(idx.shape, sparse=True)
            ih = oh * stride + idx // size
            iw = ow * stride + idx % size
            np.add.at(dxp, (bb, cc, ih, iw), g)
            return (dxp[:, :, pt : pt + H, pl : pl + W],)

        return record(out, (x,), vjp)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if padded else x.data
    # flatten each window before reducing so the summation order is the
    # row-major window order (keeps per-window means bit-exact)
    win = _windows(xp, size, stride).reshape(B, C, oH, oW, size * size)
    if padded:
        ones = np.pad(np.ones((1, 1, H, W), dtype=x.data.dtype), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        count = _windows(ones, size, stride).reshape(1, 1, oH, oW, size * size).sum(axis=-1)
    else:
        count = float(size * size)
    out = Tensor(win.sum(axis=-1) / count)

    def vjp(g):
        share = g / count
        dxp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=x.data.dtype)
        for i in range(size):
            for j in range(size):
                dxp[:, :, i : i + stride * oH : stride, j : j + stride * oW : stride] += share
        return (dxp[:, :, pt : pt + H, pl : pl + W],)

    return record(out, (x,), vjp)


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated by exponential moving average."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    Train mode normalizes with the current batch statistics (biased
    variance) and folds them into the running stats; eval mode uses the
    running stats. Both modes are differentiable.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects 4D input, got {x.shape}")
    B, C, H, W = x.shape
    if B == 0:
        raise ShapeError("batchnorm on an empty batch")
    if gamma.size != C or beta.size != C:
        raise ShapeError(f"gamma/beta must have {C} entries, got {gamma.size}/{beta.size}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    gam = gamma.data.reshape(1, C, 1, 1)
    bet = beta.data.reshape(1, C, 1, 1)

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mu
        state.running_var = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps).reshape(1, C, 1, 1)
    xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std
    out = Tensor(gam * xhat + bet)

    def vjp(g):
        ggam = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape) if gamma.requires_grad else None
        gbet = g.sum(axis=(0, 2, 3)).reshape(beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            if mode == "train":
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv_std * (dxhat - m1 - xhat * m2)
            else:
                gx = inv_std * dxhat
        return (gx, ggam, gbet)

    return record(out, (x, gamma, beta), vjp)
