"""Bit-packed execution kernels for binary-weight convolutions.

``binary_conv2d`` handles 1-bit activations with XNOR + popcount.
``bitsliced_conv2d`` handles ``k``-bit activations by splitting the integer
codes into ``k`` bit planes and combining per-plane popcounts with powers of
two.  Both agree with :func:`groupnet.tensor.conv2d_ref` on the dequantized
tensors.

Packing runs along input channels, one run of words per spatial position
(activations) or kernel tap (weights), so an im2col row is a contiguous
sequence of words.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

from .bitpack import n_words, pack_last_axis, tail_masks, unpack_last_axis
from .quant import BinarizedWeight, QuantSpec
from .tensor import ConvGeometry, DimensionError

MAX_REDUCTION = 1 << 24
MAX_SLICED_BITS = 8


class GridError(ValueError):
    """A value handed to the packer does not lie on the quantization grid."""


@intrinsic
def _popcount64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


@dataclass
class PackedBits:
    """One bit per element packed along the last logical axis.

    ``words`` has shape ``lead + (n_words,)``.  For 1-bit activations
    ``scales`` carries the per-position scale (shape ``lead``) and the
    logical shape is the original (N, C, H, W).
    """

    words: np.ndarray
    n_valid: int
    shape: tuple
    scales: np.ndarray | None = None

    def unpack(self) -> np.ndarray:
        """Boolean bits in packed order (channel last)."""
        return unpack_last_axis(self.words, self.n_valid)

    def dequantize(self) -> np.ndarray:
        if self.scales is None:
            raise ValueError("no scales attached; use unpack() for raw bits")
        bits = self.unpack().transpose(0, 3, 1, 2)
        s = self.scales[:, None, :, :]
        out = np.where(bits, s, -s)
        return out.reshape(self.shape)


@dataclass
class BitplaneCodes:
    """``k`` bit planes of integer activation codes, packed along channels.

    ``planes`` has shape ``(k, N, H, W, n_words)``; plane ``t`` holds bit
    ``t`` of each code, so ``sum_t 2**t * plane_t`` is the code.
    """

    planes: np.ndarray
    n_valid: int
    shape: tuple
    q: QuantSpec
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def k(self) -> int:
        return self.planes.shape[0]

    def codes(self) -> np.ndarray:
        out = np.zeros(self.planes.shape[1:4] + (self.n_valid,), dtype=np.int64)
        for t in range(self.k):
            out += unpack_last_axis(self.planes[t], self.n_valid).astype(np.int64) << t
        return out.transpose(0, 3, 1, 2)

    def dequantize(self) -> np.ndarray:
        return (self.codes().astype(self.dtype) * self.dtype.type(self.q.step)).reshape(self.shape)


def _as_rank4(y: np.ndarray) -> np.ndarray:
    if y.ndim == 2:
        return y[:, :, None, None]
    if y.ndim != 4:
        raise DimensionError("rank", "2 or 4", y.ndim)
    return y


def pack_activations(y: np.ndarray, q: QuantSpec) -> PackedBits | BitplaneCodes:
    """Pack activations already on the quantization grid.

    Rank-2 inputs are treated as (N, F, 1, 1).  Raises :class:`GridError` if
    any value is not exactly representable, so the round trip
    ``dequantize(pack(y)) == y`` is exact whenever packing succeeds.
    """
    y = np.asarray(y)
    shape = y.shape
    y4 = _as_rank4(y)
    if q.full_precision:
        raise ValueError("full-precision activations cannot be packed")
    if q.binary:
        mag = np.abs(y4)
        scale = mag.max(axis=1)
        bad = mag != scale[:, None]
        if bad.any():
            where = tuple(int(i[0]) for i in np.nonzero(bad))
            raise GridError(f"value {y4[where]} at {where} is not +/- the position scale {scale[where[0], where[2], where[3]]}")
        bits = (y4 >= 0).transpose(0, 2, 3, 1)
        return PackedBits(pack_last_axis(bits), y4.shape[1], shape, scale)
    if q.k > MAX_SLICED_BITS:
        raise ValueError(f"bit-sliced packing supports k <= {MAX_SLICED_BITS}")
    step = y4.dtype.type(q.step)
    codes = np.rint(y4 / step)
    bad = (codes < 0) | (codes > q.levels) | (codes.astype(y4.dtype) * step != y4)
    if bad.any():
        where = tuple(int(i[0]) for i in np.nonzero(bad))
        raise GridError(f"value {y4[where]} at {where} is off the {q.k}-bit grid with step {q.step}")
    codes = codes.astype(np.int64).transpose(0, 2, 3, 1)
    planes = np.stack([pack_last_axis((codes >> t) & 1) for t in range(q.k)])
    return BitplaneCodes(planes, y4.shape[1], shape, q, y4.dtype)


def xnor_popcount_dot(a: PackedBits, b: PackedBits) -> int:
    """Dot product of two +/-1 vectors: ``n_valid - 2 * popcount(a XOR b)``."""
    if a.n_valid != b.n_valid:
        raise DimensionError("n_valid", a.n_valid, b.n_valid)
    wa = np.ravel(a.words)
    wb = np.ravel(b.words)
    if wa.shape != wb.shape or wa.size != n_words(a.n_valid):
        raise DimensionError("words", n_words(a.n_valid), (wa.size, wb.size))
    return int(_xnor_dot(wa, wb, tail_masks(a.n_valid), a.n_valid))


@njit(cache=True)
def _xnor_dot(a, b, masks, n):
    cnt = 0
    for i in range(a.size):
        cnt += _popcount64((a[i] ^ b[i]) & masks[i])
    return n - 2 * cnt


def _pad_spatial(arr: np.ndarray, padding: int, axes=(1, 2)) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(arr)
    pad = [(0, 0)] * arr.ndim
    for ax in axes:
        pad[ax] = (padding, padding)
    return np.pad(arr, pad)


def _check_weight(weight: BinarizedWeight, geom: ConvGeometry) -> np.ndarray:
    if len(weight.shape) == 2:
        o, f = weight.shape
        if o != geom.out_channels or f != geom.in_channels * geom.kernel_h * geom.kernel_w:
            raise DimensionError("weight", geom.weight_shape, weight.shape)
        # a dense layer is a full-map convolution; repack per tap
        w4 = weight.signs().reshape(geom.weight_shape).transpose(0, 2, 3, 1)
        return pack_last_axis(w4)
    if tuple(weight.shape) != geom.weight_shape:
        raise DimensionError("weight", geom.weight_shape, weight.shape)
    return np.ascontiguousarray(weight.sign_bits)


def _check_input(n_valid: int, lead_shape, geom: ConvGeometry):
    if n_valid != geom.in_channels:
        raise DimensionError("channel", geom.in_channels, n_valid)
    if tuple(lead_shape[1:3]) != (geom.in_h, geom.in_w):
        raise DimensionError("spatial", (geom.in_h, geom.in_w), tuple(lead_shape[1:3]))
    if geom.reduction_length > MAX_REDUCTION:
        raise ValueError(f"reduction length {geom.reduction_length} exceeds {MAX_REDUCTION}")


@njit(cache=True)
def _binary_conv_kernel(xw, xs, ww, alpha, masks, n_valid, stride, ho, wo, out):
    n_img = xw.shape[0]
    kh = ww.shape[1]
    kw = ww.shape[2]
    nw = ww.shape[3]
    n_out = ww.shape[0]
    patch = np.empty((kh, kw, nw), dtype=np.uint64)
    pscale = np.empty((kh, kw), dtype=np.float64)
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        pscale[i, j] = xs[n, oy * stride + i, ox * stride + j]
                        for d in range(nw):
                            patch[i, j, d] = xw[n, oy * stride + i, ox * stride + j, d] & masks[d]
                for o in range(n_out):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            s = pscale[i, j]
                            if s != 0.0:
                                cnt = 0
                                for d in range(nw):
                                    cnt += _popcount64((patch[i, j, d] ^ ww[o, i, j, d]) & masks[d])
                                acc += s * (n_valid - 2 * cnt)
                    out[n, o, oy, ox] = alpha[o] * acc


def binary_conv2d(x: PackedBits, weight: BinarizedWeight, geom: ConvGeometry) -> np.ndarray:
    """XNOR + popcount convolution on 1-bit activations.

    Padded taps are excluded from the reduction: padded positions carry a
    zero scale, so they contribute exactly 0 just like the zero padding of
    the reference path.  Integer popcounts are formed per tap and scaled by
    that tap's activation scale; ``alpha`` is applied once per output.
    """
    if not isinstance(x, PackedBits) or x.scales is None:
        raise ValueError("binary_conv2d needs 1-bit activations with scales (k == 1)")
    _check_input(x.n_valid, x.words.shape, geom)
    ww = _check_weight(weight, geom)
    xw = _pad_spatial(x.words, geom.padding)
    xs = _pad_spatial(x.scales.astype(np.float64), geom.padding)
    n = x.words.shape[0]
    out = np.empty((n, geom.out_channels, geom.out_h, geom.out_w), dtype=np.float64)
    _binary_conv_kernel(
        xw, xs, ww, weight.alpha.astype(np.float64), tail_masks(x.n_valid), x.n_valid,
        geom.stride, geom.out_h, geom.out_w, out,
    )
    return out


@njit(cache=True)
def _bitsliced_kernel(planes, ww, alpha, masks, stride, ho, wo, out):
    k = planes.shape[0]
    n_img = planes.shape[1]
    kh = ww.shape[1]
    kw = ww.shape[2]
    nw = ww.shape[3]
    n_out = ww.shape[0]
    patch = np.empty((k, kh, kw, nw), dtype=np.uint64)
    plane_total = np.empty(k, dtype=np.int64)
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                for t in range(k):
                    tot = 0
                    for i in range(kh):
                        for j in range(kw):
                            for d in range(nw):
                                v = planes[t, n, oy * stride + i, ox * stride + j, d] & masks[d]
                                patch[t, i, j, d] = v
                                tot += _popcount64(v)
                    plane_total[t] = tot
                for o in range(n_out):
                    acc = 0
                    for t in range(k):
                        pos = 0
                        for i in range(kh):
                            for j in range(kw):
                                for d in range(nw):
                                    pos += _popcount64(ww[o, i, j, d] & patch[t, i, j, d])
                        # popcount(w_neg & plane) = total - pos
                        acc += (2 * pos - plane_total[t]) << t
                    out[n, o, oy, ox] = alpha[o] * acc


def bitsliced_conv2d(x: BitplaneCodes, weight: BinarizedWeight, geom: ConvGeometry, q: QuantSpec) -> np.ndarray:
    """Binary-weight convolution on ``k``-bit activation codes, ``1 < k <= 8``.

    Each output is ``alpha * step * sum_t 2**t * (popcount(w+ & plane_t) -
    popcount(w- & plane_t))`` with ``step = beta / (2**k - 1)``.  Padded
    positions hold code 0 and contribute nothing.
    """
    if q.k == 1:
        raise ValueError("k == 1 activations go through binary_conv2d")
    if not 1 < q.k <= MAX_SLICED_BITS:
        raise ValueError(f"bit-sliced convolution supports 1 < k <= {MAX_SLICED_BITS}, got {q.k}")
    if x.k != q.k:
        raise DimensionError("bit planes", q.k, x.k)
    _check_input(x.n_valid, x.planes.shape[1:], geom)
    ww = _check_weight(weight, geom)
    planes = _pad_spatial(x.planes, geom.padding, axes=(2, 3))
    n = x.planes.shape[1]
    out = np.empty((n, geom.out_channels, geom.out_h, geom.out_w), dtype=np.float64)
    _bitsliced_kernel(
        planes, ww, weight.alpha.astype(np.float64) * q.step, tail_masks(x.n_valid),
        geom.stride, geom.out_h, geom.out_w, out,
    )
    return out


def packed_conv2d(y: np.ndarray, weight: BinarizedWeight, geom: ConvGeometry, q: QuantSpec) -> np.ndarray:
    """Pack grid activations and dispatch on ``k``; rank-2 input/output for dense layers."""
    packed = pack_activations(y, q)
    if q.binary:
        out = binary_conv2d(packed, weight, geom)
    else:
        out = bitsliced_conv2d(packed, weight, geom, q)
    return out


__all__ = [
    "BitplaneCodes",
    "GridError",
    "PackedBits",
    "binary_conv2d",
    "bitsliced_conv2d",
    "pack_activations",
    "packed_conv2d",
    "xnor_popcount_dot",
]
