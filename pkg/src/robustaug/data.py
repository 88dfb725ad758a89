"""Datasets, deterministic splits and keyed random streams."""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
DATA_DIR_ENV = "ROBUSTAUG_DATA_DIR"


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    k = int(k)
    if k < 0:
        raise ValidationError(f"rng keys must be non-negative, got {k}")
    return k


@dataclass(frozen=True)
class RngStream:
    """Named substream of a counter-based (Philox) generator.

    The generator for ``stream.generator(*keys)`` depends only on
    (seed, tag, path, keys), never on how many draws other streams made, so
    per-example randomness is stable under any batching or worker layout.
    """

    seed: int
    tag: str = "root"
    path: tuple = ()

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.tag, self.path + tuple(_key(k) for k in keys))

    def generator(self, *keys) -> np.random.Generator:
        spawn = (_key(self.tag), *self.path, *(_key(k) for k in keys))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(_key(self.seed), spawn_key=spawn)))


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValidationError("images must be (N,C,H,W) with one label each")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixels must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def one_hot(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[indices]
        return np.eye(self.num_classes)[labels]


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test)]
        self.train, self.val, self.test = parts
        allidx = np.concatenate(parts)
        if len(np.unique(allidx)) != len(allidx):
            raise ValidationError("split parts must be disjoint")


# ---------------------------------------------------------------- CIFAR-10


def load_cifar10_binary(paths: Sequence) -> Dataset:
    """Concatenate CIFAR-10 binary files: 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise FormatError(f"{p}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        if (rec[:, 0] > 9).any():
            raise FormatError(f"{p}: label byte above 9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not images:
        raise ValidationError("no CIFAR-10 files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, "cifar10")


def resolve_data_dir(data_dir=None) -> Path:
    d = data_dir or os.environ.get(DATA_DIR_ENV)
    if not d:
        raise FileNotFoundError(f"no data directory given and {DATA_DIR_ENV} is unset")
    d = Path(d)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return d


def load_cifar10(data_dir=None, train: bool = True, classes: Sequence[int] | None = None) -> Dataset:
    """Train or test set, optionally reduced to ``classes`` (relabelled 0..len-1)."""
    d = resolve_data_dir(data_dir)
    files = [d / f for f in (CIFAR_TRAIN_FILES if train else CIFAR_TEST_FILES)]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    ds = load_cifar10_binary(files)
    if classes is None:
        return ds
    classes = list(classes)
    keep = np.isin(ds.labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in ds.labels[keep]], dtype=np.int64)
    return Dataset(ds.images[keep], labels, len(classes), f"cifar10-{'-'.join(map(str, classes))}")


# ---------------------------------------------------------------- synthetic

SYNTHETIC_KINDS = ("gaussian_blobs_img", "striped_patterns")


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _flip_labels(labels: np.ndarray, k: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction <= 0:
        return labels
    out = labels.copy()
    hit = rng.random(len(labels)) < fraction
    out[hit] = (labels[hit] + rng.integers(1, k, size=hit.sum())) % k
    return out


def synthetic_dataset(kind: str, n: int, seed: int, num_classes: int = 2, *, image_shape=(3, 16, 16),
                      separation: float | None = None, noise: float | None = None, label_noise: float = 0.0,
                      frequency: float = 2.0, block: int = 4) -> Dataset:
    """Deterministic toy image classification data.

    gaussian_blobs_img
        Each class has a blocky +-1 prototype; an image is
        ``clip(0.5 + separation * prototype + noise * N(0, 1))``. With the
        default separation/noise ratio the classes are linearly separable.
    striped_patterns
        Class k shows sinusoidal stripes at orientation ``pi * k / K`` with a
        random phase, contrast and colour tint, plus pixel noise. Random
        phase rules out a linear solution; a small CNN is needed.

    ``label_noise`` flips that fraction of labels to a uniformly chosen other
    class, after balancing.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValidationError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if not 2 <= num_classes <= 10:
        raise ValidationError("synthetic datasets have 2..10 classes")
    C, H, W = image_shape
    stream = RngStream(seed, f"synthetic/{kind}")
    labels = _balanced_labels(n, num_classes, stream.generator("labels"))
    rng = stream.generator("pixels")
    if kind == "gaussian_blobs_img":
        sep = 0.2 if separation is None else separation
        sigma = 0.1 if noise is None else noise
        proto_rng = stream.generator("prototypes")
        coarse = proto_rng.choice([-1.0, 1.0], size=(num_classes, C, -(-H // block), -(-W // block)))
        protos = np.repeat(np.repeat(coarse, block, axis=2), block, axis=3)[:, :, :H, :W]
        images = 0.5 + sep * protos[labels] + sigma * rng.standard_normal((n, C, H, W))
    else:
        amp_hi = 0.35 if separation is None else separation
        sigma = 0.08 if noise is None else noise
        yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
        theta = np.pi * labels / num_classes
        phase = rng.uniform(0, 2 * np.pi, n)
        amp = rng.uniform(0.5 * amp_hi, amp_hi, n)
        tint = rng.uniform(0.5, 1.0, (n, C))
        proj = np.cos(theta)[:, None, None] * yy + np.sin(theta)[:, None, None] * xx
        wave = np.sin(2 * np.pi * frequency * proj + phase[:, None, None])
        images = 0.5 + amp[:, None, None, None] * tint[:, :, None, None] * wave[:, None]
        images = images + sigma * rng.standard_normal((n, C, H, W))
    labels = _flip_labels(labels, num_classes, label_noise, stream.generator("label_noise"))
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes, kind)


# ---------------------------------------------------------------- statistics / splits


def dataset_mean(ds: Dataset) -> np.ndarray:
    """Per-channel mean over every pixel of every image."""
    if len(ds) == 0:
        raise ValidationError("mean of an empty dataset")
    return ds.images.mean(axis=(0, 2, 3))


def make_split(ds: Dataset, val_size: int = 1024, seed: int = 0, test_size: int = 0) -> Split:
    """Shuffle once; carve ``test_size`` then ``val_size`` indices; the rest is train."""
    n = len(ds)
    if val_size < 0 or test_size < 0 or val_size + test_size >= n:
        raise ValidationError(f"val_size={val_size} + test_size={test_size} must be below N={n}")
    perm = RngStream(seed, "split").generator().permutation(n)
    test = np.sort(perm[:test_size])
    val = np.sort(perm[test_size:test_size + val_size])
    train = np.sort(perm[test_size + val_size:])
    return Split(train, val, test)
