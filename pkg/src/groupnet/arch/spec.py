"""Declarative model specifications.

A spec file (YAML) describes a stem, a list of Z blocks, a classifier, the
activation quantizer and how the blocks are expanded into low-precision
bases.  Example::

    name: resnet-z6
    input_shape: [3, 32, 32]
    num_classes: 10
    quant: {k: 2, beta: 1.0}
    bases: 3
    variant: v1          # v1 | v2 | v3 | layerwise | custom
    partition: null      # group sizes, required when variant is custom
    stem: {out_channels: 16, kernel: 3, stride: 1, padding: 1, pool: 1}
    blocks:
      - {kind: residual-basic, out_channels: 16, stride: 1}
      - {kind: residual-basic, out_channels: 32, stride: 2}
      - {kind: plain, layers: [{type: conv, out_channels: 64, kernel: 3, padding: 1, pool: 2},
                               {type: dense, out_features: 128}]}

``v1`` puts one block per group, ``v2`` two blocks per group, ``v3`` one
group spanning every block (an ensemble of whole low-precision networks) and
``layerwise`` expands every quantized layer into ``bases`` branches instead.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..quant import QuantSpec
from ..tensor import ConvGeometry

BLOCK_KINDS = ("residual-basic", "residual-bottleneck", "plain")
MODES = ("layerwise", "groupwise", "ensemble")
VARIANTS = ("v1", "v2", "v3", "layerwise", "custom")
SPEC_KEYS = {
    "name", "input_shape", "num_classes", "quant", "bases", "variant", "partition",
    "stem", "blocks", "mask_group_grad", "dataset",
}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One convolution or dense layer followed by batch norm and optional max pooling.

    Dense layers are stored as full-map convolutions so every layer shares
    the same :class:`ConvGeometry` bookkeeping.
    """

    kind: str
    geom: ConvGeometry
    pool: int = 1

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.geom.in_channels, self.geom.in_h, self.geom.in_w)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        g = self.geom
        return (g.out_channels, g.out_h // self.pool, g.out_w // self.pool)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        g = self.geom
        if self.kind == "dense":
            return (g.out_channels, g.reduction_length)
        return g.weight_shape


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    layers: tuple[LayerSpec, ...]
    projection: ConvGeometry | None = None

    @property
    def residual(self) -> bool:
        return self.kind != "plain"

    @property
    def downsample(self) -> bool:
        return self.projection is not None

    @property
    def in_shape(self):
        return self.layers[0].in_shape

    @property
    def out_shape(self):
        return self.layers[-1].out_shape


@dataclass(frozen=True)
class GroupSpec:
    """Contiguous block indices (0-based) approximated together by ``bases`` bases."""

    blocks: tuple[int, ...]
    bases: int

    def __post_init__(self):
        if self.bases < 1:
            raise SpecError("a group needs at least one base")
        if not self.blocks:
            raise SpecError("a group needs at least one block")
        if list(self.blocks) != list(range(self.blocks[0], self.blocks[0] + len(self.blocks))):
            raise SpecError(f"group blocks must be contiguous, got {self.blocks}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    quant: QuantSpec
    mode: str
    bases: int
    stem: LayerSpec
    blocks: tuple[BlockSpec, ...]
    groups: tuple[GroupSpec, ...]
    classifier: LayerSpec
    mask_group_grad: bool = False
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def residual(self) -> bool:
        return any(b.residual for b in self.blocks)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.source)

    def digest(self) -> str:
        return spec_digest(self.source)


def spec_digest(source: dict) -> str:
    canon = json.dumps(source, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


def partition_space_size(z: int) -> int:
    """Number of ways to cut ``z`` ordered blocks into contiguous groups: ``2**(z-1)``."""
    if z < 1:
        raise ValueError("need at least one block")
    return 1 << (z - 1)


def iter_partitions(z: int):
    """Yield every contiguous partition of ``z`` blocks as a tuple of group sizes."""
    if z < 1:
        raise ValueError("need at least one block")
    for cuts in itertools.product((False, True), repeat=z - 1):
        sizes, run = [], 1
        for cut in cuts:
            if cut:
                sizes.append(run)
                run = 1
            else:
                run += 1
        sizes.append(run)
        yield tuple(sizes)


def variant_partition(variant: str, z: int, partition=None) -> tuple[str, tuple[int, ...]]:
    """Map a variant name to ``(mode, group sizes)``."""
    if variant == "v1":
        return "groupwise", (1,) * z
    if variant == "v2":
        return "groupwise", (2,) * (z // 2) + ((1,) if z % 2 else ())
    if variant == "v3":
        return "ensemble", (z,)
    if variant == "layerwise":
        return "layerwise", (1,) * z
    if variant == "custom":
        if not partition:
            raise SpecError("variant 'custom' needs an explicit partition")
        sizes = tuple(int(s) for s in partition)
        if any(s < 1 for s in sizes) or sum(sizes) != z:
            raise SpecError(f"partition {sizes} does not cover {z} blocks")
        return "groupwise", sizes
    raise SpecError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# Parsing and shape propagation
# ---------------------------------------------------------------------------


def _conv_layer(shape, out_channels, kernel=3, stride=1, padding=None, pool=1) -> LayerSpec:
    c, h, w = shape
    if padding is None:
        padding = kernel // 2
    geom = ConvGeometry(c, int(out_channels), int(kernel), int(kernel), h, w, int(stride), int(padding))
    pool = int(pool)
    if pool < 1 or geom.out_h % pool or geom.out_w % pool:
        raise SpecError(f"pool {pool} does not divide conv output {geom.out_h}x{geom.out_w}")
    return LayerSpec("conv", geom, pool)


def _dense_layer(shape, out_features) -> LayerSpec:
    c, h, w = shape
    return LayerSpec("dense", ConvGeometry(c, int(out_features), h, w, h, w, 1, 0), 1)


def _plain_layer(shape, d: dict) -> LayerSpec:
    kind = d.get("type", "conv")
    if kind == "conv":
        return _conv_layer(shape, d["out_channels"], d.get("kernel", 3), d.get("stride", 1),
                           d.get("padding"), d.get("pool", 1))
    if kind == "dense":
        return _dense_layer(shape, d["out_features"])
    raise SpecError(f"unknown layer type {kind!r}")


def _block(shape, d: dict) -> BlockSpec:
    kind = d.get("kind")
    if kind not in BLOCK_KINDS:
        raise SpecError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    if kind == "plain":
        layers, cur = [], shape
        for ld in d.get("layers", []):
            layer = _plain_layer(cur, ld)
            layers.append(layer)
            cur = layer.out_shape
        if not layers:
            raise SpecError("plain block without layers")
        return BlockSpec(kind, tuple(layers))
    out_c = int(d["out_channels"])
    stride = int(d.get("stride", 1))
    if kind == "residual-basic":
        l1 = _conv_layer(shape, out_c, 3, stride, 1)
        l2 = _conv_layer(l1.out_shape, out_c, 3, 1, 1)
        layers = (l1, l2)
    else:
        mid = int(d.get("mid_channels", max(out_c // 4, 1)))
        l1 = _conv_layer(shape, mid, 1, 1, 0)
        l2 = _conv_layer(l1.out_shape, mid, 3, stride, 1)
        l3 = _conv_layer(l2.out_shape, out_c, 1, 1, 0)
        layers = (l1, l2, l3)
    projection = None
    if layers[-1].out_shape != tuple(shape):
        projection = ConvGeometry(shape[0], out_c, 1, 1, shape[1], shape[2], stride, 0)
        if (out_c, projection.out_h, projection.out_w) != layers[-1].out_shape:
            raise SpecError(f"skip projection cannot match block output {layers[-1].out_shape}")
    return BlockSpec(kind, layers, projection)


def spec_from_dict(source: dict) -> ModelSpec:
    """Validate a raw spec mapping and resolve every layer's geometry."""
    unknown = set(source) - SPEC_KEYS
    if unknown:
        raise SpecError(f"unknown spec keys {sorted(unknown)}")
    src = copy.deepcopy(source)
    try:
        input_shape = tuple(int(v) for v in src["input_shape"])
        num_classes = int(src["num_classes"])
        stem_d = dict(src["stem"])
        block_ds = list(src["blocks"])
    except KeyError as exc:
        raise SpecError(f"missing spec field {exc}") from None
    if len(input_shape) != 3:
        raise SpecError("input_shape must be [channels, height, width]")
    qd = src.get("quant") or {}
    quant = QuantSpec(int(qd.get("k", 2)), float(qd.get("beta", 1.0)))
    bases = int(src.get("bases", 1))
    if bases < 1:
        raise SpecError("bases must be >= 1")
    stem = _conv_layer(input_shape, stem_d["out_channels"], stem_d.get("kernel", 3), stem_d.get("stride", 1),
                       stem_d.get("padding"), stem_d.get("pool", 1))
    blocks, shape = [], stem.out_shape
    for bd in block_ds:
        block = _block(shape, bd)
        blocks.append(block)
        shape = block.out_shape
    if not blocks:
        raise SpecError("a model needs at least one quantized block")
    residual = any(b.residual for b in blocks)
    if residual and any(b.layers[-1].kind == "dense" for b in blocks):
        raise SpecError("dense layers are only allowed in plain blocks")
    mode, sizes = variant_partition(src.get("variant", "v1"), len(blocks), src.get("partition"))
    groups, start = [], 0
    for size in sizes:
        groups.append(GroupSpec(tuple(range(start, start + size)), 1 if mode == "layerwise" else bases))
        start += size
    if sum(len(g.blocks) for g in groups) != len(blocks):
        raise SpecError("groups must partition the blocks")
    if residual:
        classifier = _dense_layer((shape[0], 1, 1), num_classes)
    else:
        classifier = _dense_layer(shape, num_classes)
    return ModelSpec(
        name=str(src.get("name", "model")),
        input_shape=input_shape,
        num_classes=num_classes,
        quant=quant,
        mode=mode,
        bases=bases,
        stem=stem,
        blocks=tuple(blocks),
        groups=tuple(groups),
        classifier=classifier,
        mask_group_grad=bool(src.get("mask_group_grad", False)),
        source=src,
    )


def apply_overrides(source: dict, *, bases=None, k=None, beta=None, variant=None, partition=None) -> dict:
    src = copy.deepcopy(source)
    if bases is not None:
        src["bases"] = int(bases)
    if k is not None or beta is not None:
        q = dict(src.get("quant") or {})
        if k is not None:
            q["k"] = int(k)
        if beta is not None:
            q["beta"] = float(beta)
        src["quant"] = q
    if variant is not None:
        src["variant"] = variant
    if partition is not None:
        src["partition"] = list(partition)
    return src


def load_spec(path, **overrides) -> ModelSpec:
    """Read a YAML spec file; ``overrides`` go through :func:`apply_overrides`."""
    with open(path) as fh:
        source = yaml.safe_load(fh)
    if not isinstance(source, dict):
        raise SpecError(f"{path}: spec must be a mapping")
    return spec_from_dict(apply_overrides(source, **overrides))


def builtin_spec_path(name: str) -> Path:
    here = Path(__file__).resolve().parent.parent / "specs"
    path = here / (name if name.endswith(".yaml") else name + ".yaml")
    if not path.exists():
        raise FileNotFoundError(f"no built-in spec {name!r} in {here}")
    return path


def resolve_spec_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    return builtin_spec_path(str(name_or_path))
