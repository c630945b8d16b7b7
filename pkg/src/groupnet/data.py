"""MNIST (IDX) and CIFAR-10 (binary batch) loaders plus train-time augmentation.

Files are read from a local directory; nothing is downloaded.  The default
root comes from the ``GROUPNET_DATA`` environment variable, with datasets in
``$GROUPNET_DATA/mnist`` and ``$GROUPNET_DATA/cifar10``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000
DATA_ENV = "GROUPNET_DATA"


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (byte offset {offset})")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    split: str
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes, self.mean, self.std, self.name)


def default_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def _dataset_dir(path, name: str) -> Path:
    if path:
        return Path(path)
    root = default_root()
    if root is None:
        raise FileNotFoundError(f"no {name} path given and {DATA_ENV} is not set")
    return root / name


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX image (magic 0x803) or label (magic 0x801) file."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(path, len(raw), "file shorter than the IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise DataFormatError(path, 0, f"bad magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(path, len(raw), "truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = head + int(np.prod(dims))
    if len(raw) < need:
        raise DataFormatError(path, len(raw), f"truncated payload, expected {need} bytes")
    if len(raw) > need:
        raise DataFormatError(path, need, f"{len(raw) - need} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem} not found under {root}")


def _normalize(train_u8: np.ndarray, others, num_classes, labels, name):
    x = train_u8.astype(np.float32) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    out = []
    for split, imgs, lab in zip(("train", "test"), [x] + [o.astype(np.float32) / 255.0 for o in others], labels):
        norm = (imgs - mean[None, :, None, None]) / std[None, :, None, None]
        out.append(Dataset(norm.astype(np.float32), lab.astype(np.int64), split, num_classes, mean, std, name))
    return out


def load_mnist(path=None) -> tuple[Dataset, Dataset]:
    """Load the 60000/10000 MNIST split as 1x28x28 images normalized with train statistics."""
    root = _dataset_dir(path, "mnist")
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        imgs = read_idx(_find(root, f"{prefix}-images-idx3-ubyte"))
        labs = read_idx(_find(root, f"{prefix}-labels-idx1-ubyte"))
        if imgs.ndim != 3 or labs.ndim != 1:
            raise DataFormatError(root, 0, f"{split}: image/label files swapped")
        if len(imgs) != len(labs):
            raise DataFormatError(root, 4, f"{split}: {len(imgs)} images but {len(labs)} labels")
        parts[split] = (imgs[:, None], labs)
    train, test = _normalize(parts["train"][0], [parts["test"][0]], 10,
                             [parts["train"][1], parts["test"][1]], "mnist")
    return train, test


def read_cifar_batch(path, expected_records: int | None = CIFAR_BATCH_RECORDS):
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        raise DataFormatError(path, 0, "empty file")
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(path, len(raw) - len(raw) % CIFAR_RECORD, "partial record")
    n = len(raw) // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DataFormatError(path, len(raw), f"{n} records, expected {expected_records}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(path, bad * CIFAR_RECORD, f"label {labels[bad]} out of range")
    return rec[:, 1:].reshape(n, 3, 32, 32), labels


def load_cifar10(path=None, expected_records: int | None = CIFAR_BATCH_RECORDS) -> tuple[Dataset, Dataset]:
    """Load the 50000/10000 CIFAR-10 split as 3x32x32 images normalized with train statistics."""
    root = _dataset_dir(path, "cifar10")
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train = [read_cifar_batch(root / f"data_batch_{i}.bin", expected_records) for i in range(1, 6)]
    test_x, test_y = read_cifar_batch(root / "test_batch.bin", expected_records)
    train_x = np.concatenate([b[0] for b in train])
    train_y = np.concatenate([b[1] for b in train])
    return tuple(_normalize(train_x, [test_x], 10, [train_y, test_y], "cifar10"))


def load_dataset(name: str, path=None) -> tuple[Dataset, Dataset]:
    if name == "mnist":
        return load_mnist(path)
    if name == "cifar10":
        return load_cifar10(path)
    raise ValueError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

POLICIES = {"mnist": "none", "cifar10": "crop-flip"}


def sample_crop_params(n: int, rng: np.random.Generator, pad: int = 4):
    """Per-image crop offsets in ``[0, 2*pad]`` and horizontal-flip flags."""
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    return dy, dx, flip


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1]


def crop_flip(batch: np.ndarray, dy, dx, flip, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` (zero is the per-channel mean after normalization), crop, then flip."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i in range(n):
        img = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = img[..., ::-1] if flip[i] else img
    return out


def augment(batch: np.ndarray, policy: str, rng: np.random.Generator) -> np.ndarray:
    """Train-split augmentation: ``crop-flip`` (pad 4, random crop, random flip) or ``none``."""
    if policy == "none":
        return batch
    if policy == "crop-flip":
        return crop_flip(batch, *sample_crop_params(len(batch), rng))
    raise ValueError(f"unknown augmentation policy {policy!r}")
