"""Dense tensor operations with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in (batch, channel, height, width)
layout.  Two flavours of convolution live here:

* ``conv2d_ref`` / ``linear_ref`` are direct-summation references computed in
  float64.  They are slow on purpose and serve as the oracle for the bit-packed
  kernels in :mod:`groupnet.bitkernel`.
* ``conv2d`` / ``conv2d_backward`` are the im2col + GEMM path used by training.

All functions are pure except ``batchnorm_forward`` in train mode, which
updates the running statistics held by its :class:`BatchNormState`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shape mismatch between operands; ``axis`` names the offending dimension."""

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on axis '{axis}': expected {expected}, got {got}")


def out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class ConvGeometry:
    """Static shape description of one convolution.

    A dense layer on a (C, H, W) input is described as a convolution whose
    kernel covers the whole map, giving a 1x1 output.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    in_h: int
    in_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ValueError(f"non-positive extent in {self}")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError(f"empty output for {self}")

    @property
    def out_h(self) -> int:
        return out_size(self.in_h, self.kernel_h, self.stride, self.padding)

    @property
    def out_w(self) -> int:
        return out_size(self.in_w, self.kernel_w, self.stride, self.padding)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def reduction_length(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def macs_per_sample(self) -> int:
        return self.reduction_length * self.out_channels * self.out_h * self.out_w

    def check(self, x: np.ndarray, w: np.ndarray | None = None) -> None:
        if x.ndim != 4:
            raise DimensionError("rank", 4, x.ndim)
        for axis, want, got in (
            ("channel", self.in_channels, x.shape[1]),
            ("height", self.in_h, x.shape[2]),
            ("width", self.in_w, x.shape[3]),
        ):
            if want != got:
                raise DimensionError(axis, want, got)
        if w is not None and tuple(w.shape) != self.weight_shape:
            names = ("out_channels", "in_channels", "kernel_h", "kernel_w")
            if w.ndim != 4:
                raise DimensionError("weight rank", 4, w.ndim)
            for name, want, got in zip(names, self.weight_shape, w.shape):
                if want != got:
                    raise DimensionError(name, want, got)

    @classmethod
    def from_arrays(cls, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> "ConvGeometry":
        if x.ndim != 4:
            raise DimensionError("rank", 4, x.ndim)
        if w.ndim != 4:
            raise DimensionError("weight rank", 4, w.ndim)
        if x.shape[1] != w.shape[1]:
            raise DimensionError("channel", w.shape[1], x.shape[1])
        return cls(w.shape[1], w.shape[0], w.shape[2], w.shape[3], x.shape[2], x.shape[3], stride, padding)


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


# ---------------------------------------------------------------------------
# Reference (oracle) operations
# ---------------------------------------------------------------------------


def conv2d_ref(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Direct-summation convolution in float64, zero padding, no bias.

    Every output element is accumulated tap by tap over the kernel window;
    the per-tap contraction over input channels is an exact float64 sum.
    """
    geom.check(x, w)
    xp = _pad(np.asarray(x, dtype=np.float64), geom.padding)
    w64 = np.asarray(w, dtype=np.float64)
    s = geom.stride
    ho, wo = geom.out_h, geom.out_w
    out = np.zeros((x.shape[0], geom.out_channels, ho, wo))
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            patch = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
            out += np.einsum("nchw,oc->nohw", patch, w64[:, :, i, j])
    return out


def linear_ref(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dense layer ``x @ w.T`` in float64 by explicit broadcast-and-sum."""
    if x.ndim != 2:
        raise DimensionError("rank", 2, x.ndim)
    if w.ndim != 2:
        raise DimensionError("weight rank", 2, w.ndim)
    if x.shape[1] != w.shape[1]:
        raise DimensionError("features", w.shape[1], x.shape[1])
    x64 = np.asarray(x, dtype=np.float64)
    w64 = np.asarray(w, dtype=np.float64)
    return (x64[:, None, :] * w64[None, :, :]).sum(axis=-1)


# ---------------------------------------------------------------------------
# Fast convolution (im2col + GEMM)
# ---------------------------------------------------------------------------


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Rows are output positions (n, oy, ox); columns are (c, i, j)."""
    n, c = x.shape[:2]
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = out_size(h, kh, stride, padding)
    wo = out_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Convolution forward.  Returns ``(out, cache)``; the cache keeps the input only."""
    if x.ndim != 4:
        raise DimensionError("rank", 4, x.ndim)
    if x.shape[1] != w.shape[1]:
        raise DimensionError("channel", w.shape[1], x.shape[1])
    o, _, kh, kw = w.shape
    n = x.shape[0]
    ho = out_size(x.shape[2], kh, stride, padding)
    wo = out_size(x.shape[3], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, (x, w, stride, padding)


def conv2d_backward(grad: np.ndarray, cache):
    """Returns ``(grad_x, grad_w)``; im2col is recomputed rather than cached."""
    x, w, stride, padding = cache
    o, _, kh, kw = w.shape
    g = grad.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = im2col(x, kh, kw, stride, padding)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_cols = g @ w.reshape(o, -1)
    grad_x = col2im(grad_cols, x.shape, kh, kw, stride, padding)
    return grad_x, grad_w


def linear(x: np.ndarray, w: np.ndarray):
    if x.ndim != 2:
        raise DimensionError("rank", 2, x.ndim)
    if x.shape[1] != w.shape[1]:
        raise DimensionError("features", w.shape[1], x.shape[1])
    return x @ w.T, (x, w)


def linear_backward(grad: np.ndarray, cache):
    x, w = cache
    return grad @ w, grad.T @ x


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise DimensionError("rank", "2 or 4", x.ndim)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, train: bool):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics and updates the running
    estimates in place (unbiased variance); eval mode uses the running
    estimates and returns ``None`` for the cache.
    """
    axes, bshape = _bn_axes(x)
    if x.shape[1] != state.gamma.shape[0]:
        raise DimensionError("channel", state.gamma.shape[0], x.shape[1])
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (state.gamma * inv).astype(x.dtype)
        shift = (state.beta - state.running_mean * state.gamma * inv).astype(x.dtype)
        return x * scale.reshape(bshape) + shift.reshape(bshape), None
    count = x.size // x.shape[1]
    mean = x.mean(axis=axes)
    centered = x - mean.reshape(bshape)
    var = (centered * centered).mean(axis=axes)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * state.gamma.reshape(bshape) + state.beta.reshape(bshape)
    m = state.momentum
    unbiased = var * (count / max(count - 1, 1))
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    return out, (xhat, inv_std, state.gamma)


def batchnorm_backward(grad: np.ndarray, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma = cache
    axes, bshape = _bn_axes(grad)
    count = grad.size // grad.shape[1]
    grad_beta = grad.sum(axis=axes)
    grad_gamma = (grad * xhat).sum(axis=axes)
    dxhat = grad * gamma.reshape(bshape)
    grad_x = (inv_std / count).reshape(bshape) * (
        count * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int, pad_value: float):
    xp = _pad(x, padding, pad_value)
    return sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def maxpool(x: np.ndarray, kernel: int = 2, stride: int | None = None, padding: int = 0):
    stride = kernel if stride is None else stride
    win = _windows(x, kernel, stride, padding, -np.inf)
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, kernel, stride, padding)


def maxpool_backward(grad: np.ndarray, cache) -> np.ndarray:
    x_shape, idx, kernel, stride, padding = cache
    n, c, h, w = x_shape
    ho, wo = grad.shape[2], grad.shape[3]
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    for i in range(kernel):
        for j in range(kernel):
            hit = idx == i * kernel + j
            gp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += np.where(
                hit, grad, 0
            )
    if padding:
        return gp[:, :, padding:-padding, padding:-padding]
    return gp


def avgpool(x: np.ndarray, kernel: int = 2, stride: int | None = None, padding: int = 0):
    """Average pooling; padded zeros count toward the window size."""
    stride = kernel if stride is None else stride
    win = _windows(x, kernel, stride, padding, 0.0)
    return win.mean(axis=(-2, -1)), (x.shape, kernel, stride, padding)


def avgpool_backward(grad: np.ndarray, cache) -> np.ndarray:
    x_shape, kernel, stride, padding = cache
    n, c, h, w = x_shape
    ho, wo = grad.shape[2], grad.shape[3]
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    share = grad / (kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            gp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += share
    if padding:
        return gp[:, :, padding:-padding, padding:-padding]
    return gp


def global_avgpool(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_backward(grad: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to((grad / (h * w))[:, :, None, None], x_shape).copy()


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    if logits.ndim != 2:
        raise DimensionError("rank", 2, logits.ndim)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError("batch", n, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


__all__ = [
    "BatchNormState",
    "ConvGeometry",
    "DimensionError",
    "avgpool",
    "avgpool_backward",
    "batchnorm_backward",
    "batchnorm_forward",
    "col2im",
    "conv2d",
    "conv2d_backward",
    "conv2d_ref",
    "global_avgpool",
    "global_avgpool_backward",
    "im2col",
    "linear",
    "linear_backward",
    "linear_ref",
    "maxpool",
    "maxpool_backward",
    "out_size",
    "relu",
    "softmax_cross_entropy",
]
