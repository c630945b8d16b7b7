"""Versioned named-tensor container for checkpoints and packed exports.

Layout (all integers little-endian)::

    offset  size   field
    0       8      magic: b"GNETCKPT" (training checkpoint) or b"GNETPACK" (packed export)
    8       4      format version, u32 (currently 1)
    12      32     SHA-256 digest of the canonical model-spec JSON
    44      4      header length H, u32
    48      H      header, UTF-8 JSON: {"spec": {...}, "meta": {...}}
    48+H    4      tensor count, u32
    then per tensor:
            2      name length, u16, followed by the UTF-8 name
            1      dtype code: 0 = float32, 1 = uint8
            1      rank r
            4*r    extents, u32 each
            ...    payload, row-major (float32 little-endian or raw bytes)

Training checkpoints hold latent weights, scales, batch-norm parameters and
running statistics under their model names, plus optimizer velocities under
``opt.v/<name>``.  Packed exports replace every binary weight ``<name>`` by
``<name>.bits`` (sign words as bytes) and ``<name>.alpha``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch.spec import spec_digest

FORMAT_VERSION = 1
MAGIC_CHECKPOINT = b"GNETCKPT"
MAGIC_PACKED = b"GNETPACK"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}
_CODES = {np.dtype("<f4"): 0, np.dtype(np.uint8): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    magic: bytes
    spec: dict
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    digest: str = ""

    def __post_init__(self):
        if not self.digest:
            self.digest = spec_digest(self.spec)


def write_container(path, container: Container) -> None:
    header = json.dumps({"spec": container.spec, "meta": container.meta}, sort_keys=True).encode()
    parts = [
        container.magic,
        struct.pack("<I", FORMAT_VERSION),
        bytes.fromhex(container.digest),
        struct.pack("<I", len(header)),
        header,
        struct.pack("<I", len(container.tensors)),
    ]
    for name, arr in container.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            arr = arr.astype("<f4")
        code = _CODES[arr.dtype]
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path, magic: bytes | None = None) -> Container:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    got = take(8)
    if got not in (MAGIC_CHECKPOINT, MAGIC_PACKED) or (magic is not None and got != magic):
        raise CheckpointError(f"{path}: bad magic {got!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = take(32).hex()
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode())
    if spec_digest(header["spec"]) != digest:
        raise CheckpointError(f"{path}: spec digest does not match the embedded spec")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return Container(got, header["spec"], header.get("meta", {}), tensors, digest)
