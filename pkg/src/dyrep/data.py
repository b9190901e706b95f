"""Datasets: CIFAR-10 binary records and a seeded synthetic image generator."""

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .rng import stream

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetSource:
    kind: str = "synthetic"
    path: Optional[str] = None
    seed: int = 0
    train_size: int = 5000
    test_size: int = 1000
    num_classes: int = 10
    shape: Tuple[int, int, int] = (3, 16, 16)
    snr: float = 1.0
    mean: Tuple[float, ...] = CIFAR_MEAN
    std: Tuple[float, ...] = CIFAR_STD

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10_binary"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.shape = tuple(int(v) for v in self.shape)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)

    def to_dict(self):
        d = asdict(self)
        for k in ("shape", "mean", "std"):
            d[k] = list(d[k])
        return d


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)

    def astype(self, dtype):
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes)


def normalize(x, mean, std):
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (x - mean) / std


def denormalize(x, mean, std):
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return x * std + mean


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def read_cifar10_records(path):
    """Raw ``(uint8 images (N, 3, 32, 32), labels)`` from one binary batch file."""
    raw = Path(path).read_bytes()
    n_full, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise DataFormatError(
            f"{path}: truncated record at byte offset {n_full * CIFAR_RECORD} "
            f"({rest} of {CIFAR_RECORD} bytes)"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n_full, CIFAR_RECORD)
    return rec[:, 1:].reshape(n_full, *CIFAR_SHAPE), rec[:, 0].astype(np.int64)


def write_cifar10_records(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    if images.shape[1] != CIFAR_RECORD - 1:
        raise ValueError(f"each image needs {CIFAR_RECORD - 1} bytes, got {images.shape[1]}")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(path, subset=None, split="train", mean=CIFAR_MEAN, std=CIFAR_STD):
    """Load a CIFAR-10 binary file, or the train/test files of a directory."""
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} files in {path}")
    else:
        files = [path]
    imgs, labs = zip(*(read_cifar10_records(f) for f in files))
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    x = normalize(images.astype(np.float64) / 255.0, mean, std)
    return Dataset(x, labels, 10)


def cifar10_dir():
    """Directory named by ``DYREP_CIFAR10_DIR`` if it holds the binary files."""
    d = os.environ.get("DYREP_CIFAR10_DIR")
    if d and (Path(d) / CIFAR_TRAIN_FILES[0]).exists():
        return Path(d)
    return None


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def _smooth(x, passes=2):
    for _ in range(passes):
        x = (x + np.roll(x, 1, -1) + np.roll(x, -1, -1)) / 3.0
        x = (x + np.roll(x, 1, -2) + np.roll(x, -1, -2)) / 3.0
    return x


def synthetic_dataset(seed, n, classes=10, shape=(3, 16, 16), snr=1.0, split="train"):
    """Class-conditional Gaussian images around smooth per-class prototypes.

    Prototypes depend on ``seed`` only, so train and test splits share them.
    Labels are balanced to within one sample per class.
    """
    proto_rng = stream(seed, "synthetic", "prototypes")
    protos = _smooth(proto_rng.normal(size=(classes,) + tuple(shape)))
    protos /= protos.reshape(classes, -1).std(axis=1)[:, None, None, None]
    rng = stream(seed, "synthetic", split, n)
    labels = rng.permutation(np.arange(n) % classes)
    noise = rng.normal(size=(n,) + tuple(shape))
    return Dataset(snr * protos[labels] + noise, labels, classes)


def load_source(src: DatasetSource, dtype=np.float64):
    """``(train, test)`` datasets for a source description."""
    if src.kind == "synthetic":
        train = synthetic_dataset(src.seed, src.train_size, src.num_classes, src.shape, src.snr, "train")
        test = synthetic_dataset(src.seed, src.test_size, src.num_classes, src.shape, src.snr, "test")
    else:
        if src.path is None:
            raise ValueError("cifar10_binary source needs data.path")
        train = load_cifar10(src.path, src.train_size, "train", src.mean, src.std)
        test = load_cifar10(src.path, src.test_size, "test", src.mean, src.std)
    return train.astype(dtype), test.astype(dtype)


# ---------------------------------------------------------------------------
# iteration and augmentation
# ---------------------------------------------------------------------------


def epoch_order(seed, epoch, n):
    return stream(seed, "shuffle", epoch).permutation(n)


def iterate_batches(n, batch_size, order):
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def augment(batch, rng, pad=4, enabled=True, flip=None):
    """Random ``pad``-pixel zero-pad crop plus horizontal flip.

    ``flip`` forces (True) or suppresses (False) the flip for every sample;
    ``None`` flips each sample with probability 1/2.
    """
    if not enabled:
        return batch
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip is None else np.full(n, bool(flip))
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def flip_horizontal(batch):
    return batch[..., ::-1].copy()
