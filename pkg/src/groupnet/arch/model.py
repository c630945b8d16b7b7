"""Model construction and the forward/backward engine.

Parameter names follow the topology::

    stem.w, stem.bn.{gamma,beta}           full-precision first layer
    g{p}.theta                             per-base group scales (M,)
    g{p}.m{m}.b{j}.l{i}.w                  binary layer weight of base m, block j, layer i
    g{p}.m0.b{j}.l{i}.w{r}, ...l{i}.lam    layer-wise branches and their scales
    g{p}.proj.w / g{p}.m{m}.b{j}.proj.w    full-precision 1x1 skip projections
    fc.w                                   full-precision classifier

Running batch-norm statistics live in ``Model.buffers`` under
``<prefix>.bn.mean`` and ``<prefix>.bn.var``.
"""

from __future__ import annotations

from functools import partial

import numpy as np

from .. import tensor as T
from ..bitkernel import packed_conv2d
from ..quant import (
    BinarizedWeight,
    activation_backward,
    activation_forward,
    binarize_weights,
    binarize_weights_backward,
    binarize_weights_dense,
)
from .spec import BlockSpec, GroupSpec, LayerSpec, ModelSpec, SpecError

ENGINES = ("float", "packed")


# ---------------------------------------------------------------------------
# Expansion operators
# ---------------------------------------------------------------------------


def layerwise_forward(x, branches, lam):
    """``sum_i lam_i * f_i(x)`` accumulated in branch order."""
    if len(branches) != len(lam):
        raise SpecError(f"{len(branches)} branches but {len(lam)} scales")
    out = None
    for f, scale in zip(branches, lam):
        y = f(x)
        if out is None:
            out = scale * y
        elif y.shape != out.shape:
            raise T.DimensionError("branch output", out.shape, y.shape)
        else:
            out = out + scale * y
    return out


def group_forward_single(x, bases, theta, skip=lambda x: x):
    """Group over one block: ``sum_i theta_i * phi_i(x) + skip(x)``.

    The skip is added once, outside the bases.  Pass ``skip=None`` for
    plain (non-residual) blocks.
    """
    s = layerwise_forward(x, bases, theta)
    if skip is None:
        return s
    sx = skip(x)
    if sx.shape != s.shape:
        raise T.DimensionError("skip", s.shape, sx.shape)
    return s + sx


def group_forward_multi(x, chains, theta, between=None):
    """Group over several blocks: ``sum_i theta_i * u_i^B(...u_i^1(x)...)``.

    Each chain is a list of residual units (each unit carries its own
    skip).  ``between(h, base, position)`` is applied to every inter-unit
    activation inside a base, typically the activation quantizer.
    """
    if len(chains) != len(theta):
        raise SpecError(f"{len(chains)} bases but {len(theta)} scales")
    lengths = {len(c) for c in chains}
    if len(lengths) != 1:
        raise SpecError(f"bases have different chain lengths {sorted(lengths)}")

    def run(chain, m, h):
        for pos, unit in enumerate(chain):
            h = unit(h)
            if between is not None and pos < len(chain) - 1:
                h = between(h, m, pos)
        return h

    return layerwise_forward(x, [partial(run, c, m) for m, c in enumerate(chains)], theta)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _single(g: GroupSpec) -> bool:
    return len(g.blocks) == 1


def _layer_weight_names(spec: ModelSpec, prefix: str) -> list[str]:
    if spec.mode == "layerwise":
        return [f"{prefix}.w{r}" for r in range(spec.bases)]
    return [f"{prefix}.w"]


def parameter_layout(spec: ModelSpec):
    """Yield ``(name, shape, role)`` for every tensor in deterministic order.

    Roles: ``binary`` (latent weight of a quantized layer), ``weight``
    (full-precision weight), ``gamma``, ``beta``, ``theta``, ``lam``,
    ``mean`` and ``var`` (running statistics, not trainable).
    """

    def bn(prefix, c):
        yield f"{prefix}.bn.gamma", (c,), "gamma"
        yield f"{prefix}.bn.beta", (c,), "beta"
        yield f"{prefix}.bn.mean", (c,), "mean"
        yield f"{prefix}.bn.var", (c,), "var"

    def layer(prefix, ls: LayerSpec, binary: bool):
        for name in _layer_weight_names(spec, prefix) if binary else [f"{prefix}.w"]:
            yield name, ls.weight_shape, "binary" if binary else "weight"
        if binary and spec.mode == "layerwise":
            yield f"{prefix}.lam", (spec.bases,), "lam"
        yield from bn(prefix, ls.geom.out_channels)

    def proj(prefix, geom):
        yield f"{prefix}.proj.w", geom.weight_shape, "weight"
        yield from bn(f"{prefix}.proj", geom.out_channels)

    yield from layer("stem", spec.stem, binary=False)
    for p, g in enumerate(spec.groups):
        if spec.mode != "layerwise":
            yield f"g{p}.theta", (g.bases,), "theta"
        for m in range(g.bases):
            for j in g.blocks:
                block = spec.blocks[j]
                for i, ls in enumerate(block.layers):
                    yield from layer(f"g{p}.m{m}.b{j}.l{i}", ls, binary=True)
                if block.downsample and not _single(g):
                    yield from proj(f"g{p}.m{m}.b{j}", block.projection)
        if _single(g) and spec.blocks[g.blocks[0]].downsample:
            yield from proj(f"g{p}", spec.blocks[g.blocks[0]].projection)
    yield "fc.w", spec.classifier.weight_shape, "weight"


class Model:
    """Parameters, running statistics and the topology they instantiate."""

    def __init__(self, spec: ModelSpec, params: dict, buffers: dict, roles: dict, dtype=np.float32):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.roles = roles
        self.dtype = np.dtype(dtype)
        # inference-only models carry packed weights instead of latent ones
        self.packed: dict[str, BinarizedWeight] = {}
        self.version = 0
        self._issued = 0
        self._live = None
        self._bin_cache: dict = {}

    @property
    def binary_names(self) -> list[str]:
        return [n for n, r in self.roles.items() if r == "binary"]

    @property
    def inference_only(self) -> bool:
        return bool(self.packed)

    def effective_weight(self, name: str) -> np.ndarray:
        """Weight used by the forward pass: ``alpha * sign(w)`` for quantized layers."""
        if name in self.packed:
            key = ("dense", name)
            if key not in self._bin_cache:
                self._bin_cache[key] = self.packed[name].dequantize()
            return self._bin_cache[key]
        w = self.params[name]
        if self.roles[name] == "binary" and not self.spec.quant.full_precision:
            return binarize_weights_dense(w)
        return w

    def binarized(self, name: str) -> BinarizedWeight:
        if name in self.packed:
            return self.packed[name]
        key = ("packed", name, self.version)
        if key not in self._bin_cache:
            self._bin_cache = {k: v for k, v in self._bin_cache.items() if k[0] != "packed" or k[2] == self.version}
            self._bin_cache[key] = binarize_weights(self.params[name])
        return self._bin_cache[key]

    def bn_state(self, prefix: str) -> T.BatchNormState:
        return T.BatchNormState(
            self.params[f"{prefix}.gamma"],
            self.params[f"{prefix}.beta"],
            self.buffers[f"{prefix}.mean"],
            self.buffers[f"{prefix}.var"],
        )

    def mark_updated(self) -> None:
        self.version += 1
        self._live = None

    def state_dict(self) -> dict:
        out = {k: v for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, tensors: dict, strict: bool = True) -> None:
        for name, role in self.roles.items():
            store = self.buffers if role in ("mean", "var") else self.params
            if name not in tensors:
                if strict:
                    raise KeyError(f"missing tensor {name!r}")
                continue
            src = np.asarray(tensors[name])
            if src.shape != store[name].shape:
                raise T.DimensionError(name, store[name].shape, src.shape)
            store[name] = src.astype(self.dtype, copy=True)
        self.mark_updated()

    # forward/backward pairing ------------------------------------------------

    def _issue_token(self) -> int:
        self._issued += 1
        self._live = self._issued
        return self._issued

    def _consume_token(self, token: int, version: int) -> None:
        if token != self._live or version != self.version:
            raise RuntimeError(
                "stale saved state: backward must follow the matching forward with no parameter update in between"
            )
        self._live = None


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate a model with Kaiming-normal latent weights and bases scaled by ``1/M``."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params, buffers, roles = {}, {}, {}
    for name, shape, role in parameter_layout(spec):
        roles[name] = role
        if role in ("binary", "weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif role == "gamma":
            params[name] = np.ones(shape, dtype)
        elif role == "beta":
            params[name] = np.zeros(shape, dtype)
        elif role in ("theta", "lam"):
            params[name] = np.full(shape, 1.0 / shape[0], dtype)
        elif role == "mean":
            buffers[name] = np.zeros(shape, dtype)
        elif role == "var":
            buffers[name] = np.ones(shape, dtype)
    _check_homogeneous(spec, params)
    return Model(spec, params, buffers, roles, dtype)


def _check_homogeneous(spec: ModelSpec, params: dict) -> None:
    for p, g in enumerate(spec.groups):
        shapes = []
        for m in range(g.bases):
            prefix = f"g{p}.m{m}."
            shapes.append(sorted((k[len(prefix):], v.shape) for k, v in params.items() if k.startswith(prefix)))
        if any(s != shapes[0] for s in shapes):
            raise SpecError(f"bases of group {p} are not homogeneous")


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class _Pass:
    """One forward (and optionally backward) traversal of a model."""

    def __init__(self, model: Model, train: bool, engine: str = "float"):
        if engine not in ENGINES:
            raise ValueError(f"unknown engine {engine!r}")
        if train and engine != "float":
            raise ValueError("training runs on the float engine")
        self.model = model
        self.spec = model.spec
        self.q = model.spec.quant
        self.train = train
        self.engine = engine
        self.caches: dict = {}
        self.grads: dict = {}

    # primitives ---------------------------------------------------------------

    def _save(self, key, value):
        if self.train:
            self.caches[key] = value

    def weighted(self, name: str, ls: LayerSpec, x: np.ndarray) -> np.ndarray:
        model = self.model
        binary = model.roles[name] == "binary" and not self.q.full_precision
        n = x.shape[0]
        if self.engine == "packed" and binary:
            out = packed_conv2d(x, model.binarized(name), ls.geom, self.q).astype(model.dtype)
            return out.reshape(n, -1) if ls.kind == "dense" else out
        w = model.effective_weight(name)
        if ls.kind == "conv":
            out, cache = T.conv2d(x, w, ls.geom.stride, ls.geom.padding)
        else:
            out, cache = T.linear(x.reshape(n, -1), w)
            cache = (cache, x.shape)
        self._save(name, cache)
        return out

    def weighted_backward(self, name: str, ls: LayerSpec, g: np.ndarray) -> np.ndarray:
        cache = self.caches[name]
        if ls.kind == "conv":
            gx, gw = T.conv2d_backward(g, cache)
        else:
            cache, x_shape = cache
            gx, gw = T.linear_backward(g, cache)
            gx = gx.reshape(x_shape)
        if self.model.roles[name] == "binary":
            gw = binarize_weights_backward(gw)
        self._accumulate(name, gw)
        return gx

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def bn(self, prefix: str, z: np.ndarray) -> np.ndarray:
        out, cache = T.batchnorm_forward(z, self.model.bn_state(prefix), self.train)
        self._save(prefix, cache)
        return out

    def bn_backward(self, prefix: str, g: np.ndarray) -> np.ndarray:
        gx, gg, gb = T.batchnorm_backward(g, self.caches[prefix])
        self._accumulate(f"{prefix}.gamma", gg)
        self._accumulate(f"{prefix}.beta", gb)
        return gx

    def act(self, key: str, y: np.ndarray) -> np.ndarray:
        self._save(key, y)
        return activation_forward(y, self.q)

    def act_backward(self, key: str, g: np.ndarray, masked: bool = True) -> np.ndarray:
        return activation_backward(g, self.caches[key], self.q, masked)

    # layers and blocks -----------------------------------------------------------

    def layer(self, prefix: str, ls: LayerSpec, x: np.ndarray, binary: bool = True) -> np.ndarray:
        if binary and self.spec.mode == "layerwise":
            names = _layer_weight_names(self.spec, prefix)
            lam = self.model.params[f"{prefix}.lam"]

            def branch(r, h):
                out = self.weighted(names[r], ls, h)
                self._save((prefix, "branch", r), out)
                return out

            z = layerwise_forward(x, [partial(branch, r) for r in range(len(names))], lam)
        else:
            z = self.weighted(f"{prefix}.w", ls, x)
        z = self.bn(f"{prefix}.bn", z)
        if ls.pool > 1:
            z, cache = T.maxpool(z, ls.pool)
            self._save(f"{prefix}.pool", cache)
        return z

    def layer_backward(self, prefix: str, ls: LayerSpec, g: np.ndarray, binary: bool = True) -> np.ndarray:
        if ls.pool > 1:
            g = T.maxpool_backward(g, self.caches[f"{prefix}.pool"])
        g = self.bn_backward(f"{prefix}.bn", g)
        if binary and self.spec.mode == "layerwise":
            names = _layer_weight_names(self.spec, prefix)
            lam = self.model.params[f"{prefix}.lam"]
            g_lam = np.array(
                [np.vdot(self.caches[(prefix, "branch", r)], g) for r in range(len(names))], dtype=lam.dtype
            )
            self._accumulate(f"{prefix}.lam", g_lam)
            gx = None
            for r, name in enumerate(names):
                part = self.weighted_backward(name, ls, lam[r] * g)
                gx = part if gx is None else gx + part
            return gx
        return self.weighted_backward(f"{prefix}.w", ls, g)

    def body(self, prefix: str, block: BlockSpec, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(block.layers) - 1
        for i, ls in enumerate(block.layers):
            z = self.layer(f"{prefix}.l{i}", ls, h)
            if i < last:
                h = self.act(f"{prefix}.l{i}.q", z)
        return z

    def body_backward(self, prefix: str, block: BlockSpec, g: np.ndarray) -> np.ndarray:
        last = len(block.layers) - 1
        for i in reversed(range(len(block.layers))):
            if i < last:
                g = self.act_backward(f"{prefix}.l{i}.q", g)
            g = self.layer_backward(f"{prefix}.l{i}", block.layers[i], g)
        return g

    def skip(self, prefix: str, block: BlockSpec, x: np.ndarray) -> np.ndarray:
        geom = block.projection
        out, cache = T.conv2d(x, self.model.params[f"{prefix}.proj.w"], geom.stride, geom.padding)
        self._save(f"{prefix}.proj.w", cache)
        return self.bn(f"{prefix}.proj.bn", out)

    def skip_backward(self, prefix: str, g: np.ndarray) -> np.ndarray:
        g = self.bn_backward(f"{prefix}.proj.bn", g)
        gx, gw = T.conv2d_backward(g, self.caches[f"{prefix}.proj.w"])
        self._accumulate(f"{prefix}.proj.w", gw)
        return gx

    def _skip_fn(self, prefix: str, block: BlockSpec):
        if not block.residual:
            return None
        if block.downsample:
            return partial(self.skip, prefix, block)
        return lambda x: x

    def unit(self, prefix: str, block: BlockSpec, x: np.ndarray) -> np.ndarray:
        out = self.body(prefix, block, x)
        skip = self._skip_fn(prefix, block)
        return out if skip is None else out + skip(x)

    def unit_backward(self, prefix: str, block: BlockSpec, g: np.ndarray) -> np.ndarray:
        gx = self.body_backward(prefix, block, g)
        if block.downsample:
            gx = gx + self.skip_backward(prefix, g)
        elif block.residual:
            gx = gx + g
        return gx

    # groups --------------------------------------------------------------------

    def theta(self, p: int) -> np.ndarray:
        if self.spec.mode == "layerwise":
            return np.ones(1, self.model.dtype)
        return self.model.params[f"g{p}.theta"]

    def group(self, p: int, g: GroupSpec, x: np.ndarray) -> np.ndarray:
        theta = self.theta(p)

        def stored(m, fn, h):
            out = fn(h)
            self._save((p, "base", m), out)
            return out

        if _single(g):
            j = g.blocks[0]
            block = self.spec.blocks[j]
            bases = [partial(stored, m, partial(self.body, f"g{p}.m{m}.b{j}", block)) for m in range(g.bases)]
            return group_forward_single(x, bases, theta, self._skip_fn(f"g{p}", block))

        chains = []
        for m in range(g.bases):
            units = [partial(self.unit, f"g{p}.m{m}.b{j}", self.spec.blocks[j]) for j in g.blocks]
            # record the chain output for the theta gradient
            units[-1] = partial(stored, m, units[-1])
            chains.append(units)

        def between(h, m, pos):
            return self.act(f"g{p}.m{m}.b{g.blocks[pos]}.q", h)

        return group_forward_multi(x, chains, theta, between)

    def group_backward(self, p: int, g: GroupSpec, g_s: np.ndarray) -> np.ndarray:
        theta = self.theta(p)
        g_theta = np.array([np.vdot(self.caches[(p, "base", m)], g_s) for m in range(g.bases)], dtype=theta.dtype)
        if self.spec.mode != "layerwise":
            self._accumulate(f"g{p}.theta", g_theta)
        gx = None
        for m in range(g.bases):
            gm = theta[m] * g_s
            if _single(g):
                j = g.blocks[0]
                gm = self.body_backward(f"g{p}.m{m}.b{j}", self.spec.blocks[j], gm)
            else:
                for pos in reversed(range(len(g.blocks))):
                    j = g.blocks[pos]
                    if pos < len(g.blocks) - 1:
                        gm = self.act_backward(f"g{p}.m{m}.b{j}.q", gm)
                    gm = self.unit_backward(f"g{p}.m{m}.b{j}", self.spec.blocks[j], gm)
            gx = gm if gx is None else gx + gm
        if _single(g):
            block = self.spec.blocks[g.blocks[0]]
            if block.downsample:
                gx = gx + self.skip_backward(f"g{p}", g_s)
            elif block.residual:
                gx = gx + g_s
        return gx

    # whole network ----------------------------------------------------------------

    def _quantize_group_output(self, p: int) -> bool:
        return p < len(self.spec.groups) - 1 or not self.spec.residual

    def forward(self, x: np.ndarray) -> np.ndarray:
        spec = self.spec
        if tuple(x.shape[1:]) != spec.input_shape:
            raise T.DimensionError("input", spec.input_shape, tuple(x.shape[1:]))
        x = np.asarray(x, dtype=self.model.dtype)
        h = self.act("stem.q", self.layer("stem", spec.stem, x, binary=False))
        for p, g in enumerate(spec.groups):
            s = self.group(p, g, h)
            h = self.act(f"g{p}.q", s) if self._quantize_group_output(p) else s
        if spec.residual:
            h, shape = T.global_avgpool(h)
            self._save("gap", shape)
        self._save("pre_fc_shape", h.shape)
        logits, cache = T.linear(h.reshape(h.shape[0], -1), self.model.params["fc.w"])
        self._save("fc.w", cache)
        return logits

    def backward(self, g_logits: np.ndarray) -> dict:
        spec = self.spec
        g, gw = T.linear_backward(g_logits, self.caches["fc.w"])
        self._accumulate("fc.w", gw)
        g = g.reshape(self.caches["pre_fc_shape"])
        if spec.residual:
            g = T.global_avgpool_backward(g, self.caches["gap"])
        for p in reversed(range(len(spec.groups))):
            if self._quantize_group_output(p):
                g = self.act_backward(f"g{p}.q", g, masked=spec.mask_group_grad)
            g = self.group_backward(p, spec.groups[p], g)
        g = self.act_backward("stem.q", g)
        self.layer_backward("stem", spec.stem, g, binary=False)
        return self.grads


def model_forward(model: Model, x: np.ndarray, train: bool = False, engine: str = "float"):
    """Run a forward pass; returns ``(logits, pass)``; the pass holds caches in train mode."""
    run = _Pass(model, train, engine)
    return run.forward(x), run
