"""Complexity accounting: speedup ratio, per-layer operation counts and packed memory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .arch.spec import ModelSpec, partition_space_size
from .tensor import ConvGeometry

OPS_PER_FLOAT = 64  # binary operations counted as one float multiply-accumulate


@dataclass(frozen=True)
class OpCount:
    float_macs: int = 0
    binary_ops: int = 0
    fixed_point_accs: int = 0
    float_adds: int = 0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))


def speedup_ratio(geom: ConvGeometry, bases: int, ops_per_float: int = OPS_PER_FLOAT) -> float:
    """Float-to-expanded cost ratio of one layer with binary weights and activations.

    ``sigma = (ops/M) * A / (A + ops * c_out * w_out * h_out)`` with
    ``A = c_in * c_out * w * h * w_in * h_in``.

    Examples
    --------
    >>> g = ConvGeometry(256, 256, 3, 3, 14, 14, stride=1, padding=1)
    >>> round(speedup_ratio(g, 5), 3)
    12.454
    """
    if bases < 1:
        raise ValueError("bases must be >= 1")
    a = geom.in_channels * geom.out_channels * geom.kernel_w * geom.kernel_h * geom.in_w * geom.in_h
    agg = geom.out_channels * geom.out_w * geom.out_h
    return (ops_per_float / bases) * a / (a + ops_per_float * agg)


def abc_net_ratio(m_ours: int, m_w: int, m_a: int) -> float:
    """Binary-convolution count of an ``m_w x m_a`` weight/activation expansion over ``m_ours`` bases."""
    if min(m_ours, m_w, m_a) < 1:
        raise ValueError("all base counts must be positive")
    return (m_w * m_a) / m_ours


# ---------------------------------------------------------------------------
# Model report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    shape: str
    bases: int
    ops: OpCount
    packed_bytes: float
    reference_macs: int = 0  # full-precision MACs of the same layer, for sigma


def _macs(geom: ConvGeometry) -> int:
    return geom.macs_per_sample


def _quantized_ops(geom: ConvGeometry, m: int, k: int) -> OpCount:
    macs = _macs(geom)
    if k >= 32:
        return OpCount(float_macs=m * macs)
    if k == 1:
        return OpCount(binary_ops=m * macs)
    # one AND-popcount pass per activation bitplane, combined by fixed-point adds
    return OpCount(binary_ops=m * k * macs, fixed_point_accs=m * macs)


def _packed_bytes(geom: ConvGeometry, m: int) -> float:
    n_weights = geom.out_channels * geom.reduction_length
    return m * (n_weights / 8 + 4 * geom.out_channels)


def _shape(geom: ConvGeometry) -> str:
    return f"{geom.in_channels}x{geom.in_h}x{geom.in_w}->{geom.out_channels}x{geom.out_h}x{geom.out_w} k{geom.kernel_h}x{geom.kernel_w}"


def layer_rows(spec: ModelSpec) -> list[LayerRow]:
    k = spec.quant.k
    rows = [LayerRow("stem", "float", _shape(spec.stem.geom), 1, OpCount(float_macs=_macs(spec.stem.geom)), 0.0)]
    layerwise = spec.mode == "layerwise"
    for p, g in enumerate(spec.groups):
        m = spec.bases if layerwise else g.bases
        for j in g.blocks:
            block = spec.blocks[j]
            for i, ls in enumerate(block.layers):
                ops = _quantized_ops(ls.geom, m, k)
                if layerwise:
                    geo = ls.geom
                    ops = ops + OpCount(float_adds=m * geo.out_channels * geo.out_h * geo.out_w)
                rows.append(
                    LayerRow(f"g{p}.b{j}.l{i}", ls.kind, _shape(ls.geom), m, ops,
                             0.0 if k >= 32 else _packed_bytes(ls.geom, m), _macs(ls.geom))
                )
            if block.downsample:
                copies = 1 if len(g.blocks) == 1 else g.bases
                proj = block.projection
                rows.append(LayerRow(f"g{p}.b{j}.proj", "float", _shape(proj), copies,
                                     OpCount(float_macs=copies * _macs(proj)), 0.0))
        if not layerwise:
            c, h, w = spec.blocks[g.blocks[-1]].out_shape
            rows.append(LayerRow(f"g{p}.aggregate", "sum", f"{c}x{h}x{w}", g.bases,
                                 OpCount(float_adds=g.bases * c * h * w), 0.0))
    rows.append(LayerRow("fc", "float", _shape(spec.classifier.geom), 1,
                         OpCount(float_macs=_macs(spec.classifier.geom)), 0.0))
    return rows


def model_sigma(rows: list[LayerRow], ops_per_float: int = OPS_PER_FLOAT) -> float | None:
    """Aggregate speedup over the expanded part: reference MACs / (binary ops / ops_per_float + aggregation adds).

    Only defined for 1-bit activations; returns None otherwise.
    """
    quant = [r for r in rows if r.reference_macs]
    if not quant or any(r.ops.fixed_point_accs or r.ops.float_macs for r in quant):
        return None
    ref = sum(r.reference_macs for r in quant)
    adds = sum(r.ops.float_adds for r in rows if r.kind == "sum" or r.reference_macs)
    cost = sum(r.ops.binary_ops for r in quant) / ops_per_float + adds
    return ref / cost


def model_report(spec: ModelSpec, ops_per_float: int = OPS_PER_FLOAT) -> dict:
    """Per-layer op counts, totals, packed-weight memory and aggregate sigma as a JSON-ready dict."""
    rows = layer_rows(spec)
    total = OpCount()
    for r in rows:
        total = total + r.ops
    return {
        "spec_digest": spec.digest(),
        "spec": spec.to_dict(),
        "ops_per_float": ops_per_float,
        "num_blocks": spec.num_blocks,
        "partition_space": partition_space_size(spec.num_blocks),
        "layers": [
            {"name": r.name, "kind": r.kind, "shape": r.shape, "bases": r.bases,
             **asdict(r.ops), "packed_bytes": r.packed_bytes}
            for r in rows
        ],
        "total": {**asdict(total), "packed_bytes": sum(r.packed_bytes for r in rows)},
        "sigma": model_sigma(rows, ops_per_float),
    }


def format_report(report: dict) -> str:
    cols = ("name", "kind", "shape", "bases", "float_macs", "binary_ops", "fixed_point_accs", "float_adds",
            "packed_bytes")
    table = [cols]
    for row in report["layers"] + [{"name": "total", "kind": "", "shape": "", "bases": "", **report["total"]}]:
        table.append(tuple(f"{row[c]:.0f}" if c == "packed_bytes" else str(row[c]) for c in cols))
    widths = [max(len(r[i]) for r in table) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) if i < 3 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))) for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.insert(-1, lines[1])
    sigma = report["sigma"]
    lines.append(f"sigma (1-bit activations, {report['ops_per_float']} binary ops per float): "
                 + ("n/a" if sigma is None else f"{sigma:.3f}"))
    lines.append(f"contiguous partitions of {report['num_blocks']} blocks: {report['partition_space']}")
    lines.append(f"spec digest: {report['spec_digest']}")
    return "\n".join(lines)


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
