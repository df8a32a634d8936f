"""1-D convolution primitives over channel-major signals.

Causal convolution: y(t) = sum_k w_k x(t - d*k), so the output at t sees only
current and past samples.  Same-length outputs come from zero-padding
(K-1)*d samples on the left (right, for the anticausal mirror).  Dilation d
skips d-1 positions between taps, growing the receptive field without extra
parameters.

Inputs are [C, T] or [B, C, T]; kernels are small, so the loops run over K
while numpy batches everything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _result, as_tensor


@dataclass
class Conv1dKernel:
    """Weights [out_channels, in_channels, K], bias [out_channels], dilation."""

    weights: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ShapeError(f"conv weights must be [out, in, K], got {self.weights.shape}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.kernel_size < 1:
            raise ShapeError("kernel size must be >= 1")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match "
                             f"{self.out_channels} output channels")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def _to3d(x: Tensor, in_channels: int, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        arr, batched = x.data[None, :, :], False
    elif x.ndim == 3:
        arr, batched = x.data, True
    else:
        raise ShapeError(f"{op} expects [C, T] or [B, C, T], got {x.shape}")
    if arr.shape[1] != in_channels:
        raise ShapeError(f"{op}: input has {arr.shape[1]} channels, kernel "
                         f"expects {in_channels}")
    if arr.shape[2] < 1:
        raise ShapeError(f"{op}: empty time axis")
    return arr, batched


def conv1d_causal(x, k: Conv1dKernel) -> Tensor:
    """Dilated causal convolution, output length == input length."""
    x = as_tensor(x)
    x3, batched = _to3d(x, k.in_channels, "conv1d_causal")
    w, b, d = k.weights, k.bias, k.dilation
    K = k.kernel_size
    B, _, T = x3.shape
    pad = (K - 1) * d
    xp = np.pad(x3, ((0, 0), (0, 0), (pad, 0)))
    y = np.zeros((B, k.out_channels, T))
    for i in range(K):
        lo = pad - d * i
        y += np.matmul(w.data[:, :, i], xp[:, :, lo:lo + T])
    y += b.data[:, None]
    out = _result(y if batched else y[0], "conv1d_causal", (x, w, b))
    if out.requires_grad:
        wd = w.data
        def bw(g):
            g3 = g if batched else g[None]
            if b.requires_grad:
                b.accumulate_grad(g3.sum(axis=(0, 2)))
            if w.requires_grad:
                dw = np.empty_like(wd)
                for i in range(K):
                    lo = pad - d * i
                    dw[:, :, i] = np.tensordot(g3, xp[:, :, lo:lo + T],
                                               axes=([0, 2], [0, 2]))
                w.accumulate_grad(dw)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(K):
                    lo = pad - d * i
                    dxp[:, :, lo:lo + T] += np.matmul(wd[:, :, i].T, g3)
                dx = dxp[:, :, pad:]
                x.accumulate_grad(dx if batched else dx[0])
        out._backward = bw
    return out


def conv1d_anticausal(x, k: Conv1dKernel) -> Tensor:
    """Mirror of conv1d_causal: y(t) = sum_k w_k x(t + d*k), right-padded."""
    x = as_tensor(x)
    x3, batched = _to3d(x, k.in_channels, "conv1d_anticausal")
    w, b, d = k.weights, k.bias, k.dilation
    K = k.kernel_size
    B, _, T = x3.shape
    pad = (K - 1) * d
    xp = np.pad(x3, ((0, 0), (0, 0), (0, pad)))
    y = np.zeros((B, k.out_channels, T))
    for i in range(K):
        lo = d * i
        y += np.matmul(w.data[:, :, i], xp[:, :, lo:lo + T])
    y += b.data[:, None]
    out = _result(y if batched else y[0], "conv1d_anticausal", (x, w, b))
    if out.requires_grad:
        wd = w.data
        def bw(g):
            g3 = g if batched else g[None]
            if b.requires_grad:
                b.accumulate_grad(g3.sum(axis=(0, 2)))
            if w.requires_grad:
                dw = np.empty_like(wd)
                for i in range(K):
                    lo = d * i
                    dw[:, :, i] = np.tensordot(g3, xp[:, :, lo:lo + T],
                                               axes=([0, 2], [0, 2]))
                w.accumulate_grad(dw)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(K):
                    lo = d * i
                    dxp[:, :, lo:lo + T] += np.matmul(wd[:, :, i].T, g3)
                dx = dxp[:, :, :T]
                x.accumulate_grad(dx if batched else dx[0])
        out._backward = bw
    return out


def depthwise_conv1d(x, kernels, dilation: int = 1) -> Tensor:
    """Per-channel causal convolution: channel c of the output sees only
    channel c of the input.  `kernels` is [C, K], one row per channel."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 2:
        raise ShapeError(f"depthwise kernels must be [C, K], got {kernels.shape}")
    C, K = kernels.shape
    x3, batched = _to3d(x, C, "depthwise_conv1d")
    d = dilation
    if d < 1:
        raise ShapeError(f"dilation must be >= 1, got {d}")
    B, _, T = x3.shape
    pad = (K - 1) * d
    xp = np.pad(x3, ((0, 0), (0, 0), (pad, 0)))
    y = np.zeros((B, C, T))
    for i in range(K):
        lo = pad - d * i
        y += kernels.data[None, :, i:i + 1] * xp[:, :, lo:lo + T]
    out = _result(y if batched else y[0], "depthwise_conv1d", (x, kernels))
    if out.requires_grad:
        kd = kernels.data
        def bw(g):
            g3 = g if batched else g[None]
            if kernels.requires_grad:
                dk = np.empty_like(kd)
                for i in range(K):
                    lo = pad - d * i
                    dk[:, i] = (g3 * xp[:, :, lo:lo + T]).sum(axis=(0, 2))
                kernels.accumulate_grad(dk)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(K):
                    lo = pad - d * i
                    dxp[:, :, lo:lo + T] += kd[None, :, i:i + 1] * g3
                dx = dxp[:, :, pad:]
                x.accumulate_grad(dx if batched else dx[0])
        out._backward = bw
    return out


def pointwise_conv1d(x, mix) -> Tensor:
    """1x1 channel mixing: out[o, t] = sum_c mix[o, c] * x[c, t]."""
    x, mix = as_tensor(x), as_tensor(mix)
    if mix.ndim != 2:
        raise ShapeError(f"pointwise mix must be [out, in], got {mix.shape}")
    x3, batched = _to3d(x, mix.shape[1], "pointwise_conv1d")
    y = np.matmul(mix.data, x3)
    out = _result(y if batched else y[0], "pointwise_conv1d", (x, mix))
    if out.requires_grad:
        md = mix.data
        def bw(g):
            g3 = g if batched else g[None]
            if mix.requires_grad:
                mix.accumulate_grad(np.tensordot(g3, x3, axes=([0, 2], [0, 2])))
            if x.requires_grad:
                dx = np.matmul(md.T, g3)
                x.accumulate_grad(dx if batched else dx[0])
        out._backward = bw
    return out
