"""Wall-clock comparison of the packed kernels against the reference convolution."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .analysis import speedup_ratio
from .bitkernel import binary_conv2d, bitsliced_conv2d, pack_activations
from .quant import QuantSpec, activation_forward, binarize_weights
from .tensor import ConvGeometry, conv2d_ref


@dataclass(frozen=True)
class BenchResult:
    geom: ConvGeometry
    k: int
    reference_seconds: float
    packed_seconds: float
    predicted_sigma: float | None

    @property
    def measured_speedup(self) -> float:
        return self.reference_seconds / self.packed_seconds


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_layer(geom: ConvGeometry, q: QuantSpec, bases: int = 1, batch: int = 1, repeats: int = 3,
                seed: int = 0) -> BenchResult:
    """Time one packed convolution against ``conv2d_ref`` on the same dequantized operands.

    Packing is done outside the timed region; both sides get one warm-up call.
    """
    if q.full_precision:
        raise ValueError("benchmarking needs a quantized configuration (k < 32)")
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((batch, geom.in_channels, geom.in_h, geom.in_w)).astype(np.float32)
    weight = binarize_weights(rng.standard_normal(geom.weight_shape).astype(np.float32))
    packed = pack_activations(activation_forward(y, q), q)
    if q.binary:
        run = lambda: binary_conv2d(packed, weight, geom)  # noqa: E731
    else:
        run = lambda: bitsliced_conv2d(packed, weight, geom, q)  # noqa: E731
    dense_x = packed.dequantize()
    dense_w = weight.dequantize()
    ref = lambda: conv2d_ref(dense_x, dense_w, geom)  # noqa: E731
    run()
    ref()
    t_packed = _best_time(run, repeats)
    t_ref = _best_time(ref, repeats)
    sigma = speedup_ratio(geom, bases) if q.binary else None
    return BenchResult(geom, q.k, t_ref, t_packed, sigma)
