"""Weight binarization and low-bit activation quantization with STE backward passes.

Weights are always binary: ``b = alpha * sign(w)`` with one ``alpha`` per
output channel equal to the mean absolute value of that filter.  Activations
are clipped to ``[0, beta]`` and rounded onto a uniform ``k``-bit grid
(``k > 1``), binarized with a per-position scale (``k == 1``), or left in full
precision (``k == 32``, a debug/pretraining mode in which the rectifier is
kept and weights are not binarized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitpack import pack_last_axis, unpack_last_axis

FULL_PRECISION = 32
MAX_BITS = 16


@dataclass(frozen=True)
class QuantSpec:
    """Activation bitwidth ``k`` and fixed clip bound ``beta``."""

    k: int = 2
    beta: float = 1.0

    def __post_init__(self):
        if not (1 <= self.k <= MAX_BITS or self.k == FULL_PRECISION):
            raise ValueError(f"activation bitwidth must be in [1, {MAX_BITS}] or {FULL_PRECISION}, got {self.k}")
        if not self.beta > 0:
            raise ValueError(f"clip bound beta must be positive, got {self.beta}")

    @property
    def levels(self) -> int:
        """Largest integer code, ``2**k - 1``."""
        return (1 << self.k) - 1

    @property
    def step(self) -> float:
        return self.beta / self.levels

    @property
    def full_precision(self) -> bool:
        return self.k == FULL_PRECISION

    @property
    def binary(self) -> bool:
        return self.k == 1


@dataclass
class BinarizedWeight:
    """Packed sign bits plus one positive scale per output channel.

    ``sign_bits`` packs along input channels: shape ``(c_out, kh, kw, words)``
    for a filter bank and ``(c_out, words)`` for a dense matrix.  A set bit
    means ``+1``.
    """

    sign_bits: np.ndarray
    alpha: np.ndarray
    shape: tuple
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def n_valid(self) -> int:
        return self.shape[1]

    def signs(self) -> np.ndarray:
        """Boolean sign array in the original weight layout."""
        bits = unpack_last_axis(self.sign_bits, self.n_valid)
        if len(self.shape) == 4:
            return bits.transpose(0, 3, 1, 2)
        return bits

    def dequantize(self) -> np.ndarray:
        a = self.alpha.astype(self.dtype).reshape((-1,) + (1,) * (len(self.shape) - 1))
        return np.where(self.signs(), a, -a)


def _channel_alpha(w: np.ndarray) -> np.ndarray:
    return np.abs(w).reshape(w.shape[0], -1).mean(axis=1)


def binarize_weights(w: np.ndarray) -> BinarizedWeight:
    """Binarize a filter bank ``(c_out, c_in, kh, kw)`` or dense matrix ``(out, in)``.

    Ties go to ``+1``.  An all-zero filter gets ``alpha = 0``.
    """
    w = np.asarray(w)
    if w.ndim not in (2, 4):
        raise ValueError(f"expected a rank-2 or rank-4 weight, got rank {w.ndim}")
    alpha = _channel_alpha(w)
    sign = w >= 0
    if w.ndim == 4:
        sign = sign.transpose(0, 2, 3, 1)
    return BinarizedWeight(pack_last_axis(sign), alpha, tuple(w.shape), w.dtype)


def binarize_weights_dense(w: np.ndarray) -> np.ndarray:
    """Dequantized binary weights ``alpha * sign(w)`` without packing.

    Bit-identical to ``binarize_weights(w).dequantize()``; used on the
    training path where packing every step would be wasted work.
    """
    a = _channel_alpha(w).reshape((-1,) + (1,) * (w.ndim - 1))
    return np.where(w >= 0, a, -a)


def binarize_weights_backward(grad_b: np.ndarray) -> np.ndarray:
    """Straight-through: the gradient w.r.t. the latent weight is the gradient w.r.t. ``b``."""
    return grad_b


def quantize_activation(y: np.ndarray, q: QuantSpec) -> np.ndarray:
    """Clip to ``[0, beta]`` and round onto the ``k``-bit grid ``m * beta / (2**k - 1)``."""
    if q.k <= 1 or q.full_precision:
        raise ValueError(f"quantize_activation needs 1 < k < {FULL_PRECISION}, got k={q.k}")
    y = np.asarray(y)
    dt = y.dtype if np.issubdtype(y.dtype, np.floating) else np.dtype(np.float64)
    codes = activation_codes(y, q)
    return codes.astype(dt) * dt.type(q.step)


def activation_codes(y: np.ndarray, q: QuantSpec) -> np.ndarray:
    """Integer codes ``m`` in ``[0, 2**k - 1]`` of the clipped, rounded activation."""
    clipped = np.clip(y, 0.0, q.beta)
    return np.rint(clipped * (q.levels / q.beta)).astype(np.int32)


def quantize_activation_backward(grad_out: np.ndarray, y: np.ndarray, q: QuantSpec) -> np.ndarray:
    """STE through the rounding; the clip blocks gradient outside ``[0, beta]``."""
    return grad_out * ((y >= 0) & (y <= q.beta))


def binarize_activation_xnor(y: np.ndarray):
    """Sign bits and per-position scale for 1-bit activations.

    The scale is the mean of ``|y|`` over the channel axis (axis 1), kept as
    a size-1 axis so that ``scale * sign`` broadcasts back to ``y``.
    Returns ``(signs, scale)`` with ``signs`` boolean (``True`` for ``+1``).
    """
    y = np.asarray(y)
    scale = np.abs(y).mean(axis=1, keepdims=True)
    return y >= 0, scale


def dequantize_xnor(signs: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.where(signs, scale, -scale)


def binarize_activation_xnor_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * (np.abs(y) <= 1)


def activation_forward(y: np.ndarray, q: QuantSpec) -> np.ndarray:
    """The activation applied before every quantized layer, dispatched on ``k``."""
    if q.full_precision:
        return np.maximum(y, 0)
    if q.binary:
        return dequantize_xnor(*binarize_activation_xnor(y))
    return quantize_activation(y, q)


def activation_backward(grad_out: np.ndarray, y: np.ndarray, q: QuantSpec, masked: bool = True) -> np.ndarray:
    """STE backward of :func:`activation_forward`.

    With ``masked=False`` the quantizer is fully transparent (``dl/dy = dl/dy~``);
    the exact rectifier derivative is still used when ``k == 32``.
    """
    if q.full_precision:
        return grad_out * (y > 0)
    if not masked:
        return grad_out
    if q.binary:
        return binarize_activation_xnor_backward(grad_out, y)
    return quantize_activation_backward(grad_out, y, q)
