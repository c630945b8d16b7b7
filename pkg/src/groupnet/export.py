"""Packed inference-only models: binary weights stored as sign bits plus scales."""

from __future__ import annotations

import numpy as np

from .arch.model import Model, build_model
from .arch.spec import spec_from_dict
from .checkpoint import MAGIC_PACKED, Container, read_container, write_container
from .quant import BinarizedWeight


def packed_tensors(model: Model) -> dict:
    """Named tensors of the packed form: ``<name>.bits`` (uint8) and ``<name>.alpha`` per binary weight."""
    out = {}
    binarize = not model.spec.quant.full_precision
    for name, arr in model.state_dict().items():
        if binarize and model.roles[name] == "binary":
            bw = model.binarized(name)
            out[f"{name}.bits"] = np.ascontiguousarray(bw.sign_bits).view(np.uint8)
            out[f"{name}.alpha"] = bw.alpha.astype(np.float32)
        else:
            out[name] = arr
    return out


def export_packed(model: Model, path) -> None:
    if model.inference_only:
        raise ValueError("model is already packed")
    meta = {"dtype": model.dtype.name, "binary": model.binary_names}
    write_container(path, Container(MAGIC_PACKED, model.spec.to_dict(), meta, packed_tensors(model)))


def load_packed(path) -> Model:
    """Rebuild an inference-only model; binary layers execute from their packed signs."""
    box = read_container(path, MAGIC_PACKED)
    spec = spec_from_dict(box.spec)
    dtype = np.dtype(box.meta.get("dtype", "float32"))
    model = build_model(spec, seed=0, dtype=dtype)
    tensors = dict(box.tensors)
    packed = {}
    for name in model.binary_names:
        if f"{name}.bits" not in tensors:
            continue
        shape = model.params[name].shape
        bits = tensors.pop(f"{name}.bits")
        alpha = tensors.pop(f"{name}.alpha").astype(dtype)
        words = bits.view(np.uint64)
        packed[name] = BinarizedWeight(words, alpha, tuple(shape), dtype)
        tensors[name] = np.zeros(shape, dtype)  # placeholder; the packed form is authoritative
    model.load_state(tensors)
    for name in packed:
        del model.params[name]
    model.packed = packed
    return model
