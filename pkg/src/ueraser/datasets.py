"""CIFAR-10 binary ingestion, a synthetic stand-in dataset and minibatching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import keyed_rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_BATCH_RECORDS = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
RECORDS_MAGIC = b"UESD"

TAGS = ("clean", "poisoned", "train", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray          # float32 [N, 3, H, W] in [0, 1]
    labels: np.ndarray          # int64 [N]
    num_classes: int
    tag: str = "clean"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [N, 3, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, tag=None):
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              tag or self.tag, dict(self.meta))


# ---------------------------------------------------------------- CIFAR-10

def read_cifar_batch(path, expected_records=CIFAR_BATCH_RECORDS, limit=None):
    """Parse one CIFAR-10 binary batch: 1 label byte + R, G, B planes per record."""
    path = Path(path)
    size = path.stat().st_size
    if size != expected_records * CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path.name}: size {size} bytes, expected {expected_records}x{CIFAR_RECORD}")
    n = expected_records if limit is None else min(limit, expected_records)
    with open(path, "rb") as f:
        raw = np.frombuffer(f.read(n * CIFAR_RECORD), dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / np.float32(255)
    return images, labels


def write_cifar_batch(path, images, labels):
    """Inverse of :func:`read_cifar_batch` for images quantized to k/255."""
    images = np.asarray(images)
    pix = np.rint(images * 255).clip(0, 255).astype(np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rec.tobytes())


def _cifar_dir(root):
    root = Path(root)
    if not (root / CIFAR_TEST_FILE).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    return root


def load_cifar10(root, train_limit=None, test_limit=None):
    """Load (train, test) from a directory with the six standard binary batches.

    ``train_limit``/``test_limit`` keep only the first N records (all files are
    still size-checked).
    """
    root = _cifar_dir(root)
    files = [root / n for n in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]]
    for f in files:
        if not f.exists():
            raise DatasetFormatError(f"missing CIFAR-10 file {f.name} in {root}")
        if f.stat().st_size != CIFAR_BATCH_RECORDS * CIFAR_RECORD:
            raise DatasetFormatError(
                f"{f.name}: size {f.stat().st_size} bytes, expected "
                f"{CIFAR_BATCH_RECORDS}x{CIFAR_RECORD}")
    imgs, labs = [], []
    remaining = train_limit
    for f in files[:5]:
        if remaining is not None and remaining <= 0:
            break
        x, y = read_cifar_batch(f, limit=remaining)
        imgs.append(x)
        labs.append(y)
        if remaining is not None:
            remaining -= len(y)
    train = LabeledDataset(np.concatenate(imgs), np.concatenate(labs), 10, "train",
                           {"source": "cifar10"})
    x, y = read_cifar_batch(files[5], limit=test_limit)
    test = LabeledDataset(x, y, 10, "test", {"source": "cifar10"})
    return train, test


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthSpec:
    height: int = 16
    width: int = 16
    num_classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 200
    strength: float = 0.07
    noise_std: float = 0.08
    block: int = 4
    seed: int = 0

    def validate(self):
        if self.height < 8 or self.width < 8 or self.height % 4 or self.width % 4:
            raise ValueError("H, W must be >= 8 and divisible by 4")
        if self.strength < 0 or self.noise_std < 0:
            raise ValueError("strength and noise_std must be non-negative")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError("num_classes must be in [2, 256]")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class counts must be positive")


def class_templates(spec: SynthSpec):
    """Per-class +-1 block patterns, shared by all three channels: [C, H, W]."""
    rng = keyed_rng(spec.seed, "synth/templates")
    bh, bw = -(-spec.height // spec.block), -(-spec.width // spec.block)
    signs = rng.choice(np.array([-1.0, 1.0], np.float32), size=(spec.num_classes, bh, bw))
    pat = np.repeat(np.repeat(signs, spec.block, axis=1), spec.block, axis=2)
    return pat[:, :spec.height, :spec.width]


def _synth_split(spec, templates, per_class, split):
    rng = keyed_rng(spec.seed, f"synth/{split}")
    n = per_class * spec.num_classes
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    labels = labels[rng.permutation(n)]
    noise = rng.standard_normal((n, 3, spec.height, spec.width)).astype(np.float32)
    x = 0.5 + spec.noise_std * noise + spec.strength * templates[labels][:, None]
    # quantize to 8-bit levels so the record format round-trips exactly
    x = np.rint(np.clip(x, 0, 1) * 255).astype(np.float32) / np.float32(255)
    return LabeledDataset(x, labels, spec.num_classes, split, {"source": "synth"})


def synth_dataset(spec: SynthSpec | None = None):
    """Deterministic (train, test) pair; train and test use disjoint noise streams."""
    spec = spec or SynthSpec()
    spec.validate()
    t = class_templates(spec)
    return (_synth_split(spec, t, spec.train_per_class, "train"),
            _synth_split(spec, t, spec.test_per_class, "test"))


def save_records(path, ds: LabeledDataset):
    """CIFAR-style records preceded by a header: magic, H, W, classes, count (u32 LE)."""
    _, h, w = ds.image_shape
    with open(path, "wb") as f:
        f.write(RECORDS_MAGIC + struct.pack("<4I", h, w, ds.num_classes, len(ds)))
        pix = np.rint(ds.images * 255).clip(0, 255).astype(np.uint8).reshape(len(ds), -1)
        f.write(np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1).tobytes())


def load_records(path, tag="clean"):
    raw = Path(path).read_bytes()
    if raw[:4] != RECORDS_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    h, w, c, n = struct.unpack_from("<4I", raw, 4)
    rec = 1 + 3 * h * w
    body = raw[20:]
    if len(body) != n * rec:
        raise DatasetFormatError(f"{path}: expected {n} records of {rec} bytes")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(n, rec)
    images = arr[:, 1:].reshape(n, 3, h, w).astype(np.float32) / np.float32(255)
    return LabeledDataset(images, arr[:, 0].astype(np.int64), c, tag)


# ---------------------------------------------------------------- batching

def epoch_order(n, epoch, seed):
    return keyed_rng(seed, "minibatch", epoch).permutation(n)


def minibatches(ds: LabeledDataset, batch_size, epoch, seed):
    """Yield (images, labels, indices) in an epoch-keyed shuffled order.

    The trailing short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = epoch_order(len(ds), epoch, seed)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx], idx
