"""Dataset ingestion: CIFAR-10 binary batches and synthetic Gaussian blobs."""

import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

DATA_ENV = "VITPRUNE_DATA"

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


def data_root(path=None):
    """``path`` if given, else ``$VITPRUNE_DATA``, else ``./data``."""
    return Path(path or os.environ.get(DATA_ENV) or "data")


def read_cifar_batch(path):
    """Raw records of one binary batch file.

    Returns
    -------
    images : uint8 ndarray of shape (N, 3, 32, 32)
    labels : uint8 ndarray of shape (N,)

    Raises
    ------
    DataFormatError
        If the file size is not a whole number of records or a label is
        above 9.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise DataFormatError(
            f"{path}: size {raw.size} is not a positive multiple of {RECORD_BYTES}")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].copy()
    if labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]}")
    return rec[:, 1:].reshape(-1, *IMAGE_SHAPE).copy(), labels


def normalize_cifar(images, dtype=np.float32):
    x = images.astype(dtype) / 255.0
    mean = np.asarray(CIFAR10_MEAN, dtype=dtype).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR10_STD, dtype=dtype).reshape(1, 3, 1, 1)
    return (x - mean) / std


def load_cifar10(path=None, split="train", normalize=True, dtype=np.float32):
    """Load the train (five batches) or test split of CIFAR-10.

    Pixels are scaled to [0, 1] and standardized per channel with
    ``CIFAR10_MEAN`` / ``CIFAR10_STD`` unless ``normalize`` is false, in which
    case the raw ``uint8`` values are returned.
    """
    root = data_root(path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    names = {"train": TRAIN_FILES, "test": TEST_FILES}.get(split)
    if names is None:
        raise ConfigError(f"unknown split {split!r}")
    missing = [n for n in names if not (root / n).is_file()]
    if missing:
        raise DataFormatError(f"{root}: missing {', '.join(missing)}")
    parts = [read_cifar_batch(root / n) for n in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts]).astype(np.int64)
    return (normalize_cifar(images, dtype) if normalize else images), labels


def gen_synthetic(seed, classes=10, samples=1000, image_size=32, channels=3,
                  signal=1.0, noise=1.0, grid=4, dtype=np.float32):
    """Class-conditional Gaussian-blob images.

    Each class gets a smooth mean image: an i.i.d. normal ``grid x grid``
    pattern per channel, upsampled by pixel repetition.  A sample is its
    class mean times ``signal`` plus i.i.d. normal noise of scale ``noise``.
    Labels cycle through the classes, then the order is shuffled.  The same
    arguments always give the same arrays.

    Returns
    -------
    X : ndarray of shape (samples, channels, image_size, image_size)
    y : int64 ndarray of shape (samples,)
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if image_size % grid:
        raise ConfigError("image_size must be a multiple of grid")
    rng = np.random.default_rng(seed)
    rep = image_size // grid
    coarse = rng.standard_normal((classes, channels, grid, grid))
    means = coarse.repeat(rep, axis=2).repeat(rep, axis=3)
    y = np.arange(samples) % classes
    rng.shuffle(y)
    X = signal * means[y] + noise * rng.standard_normal((samples, channels, image_size, image_size))
    return X.astype(dtype), y.astype(np.int64)


def split_validation(X, y, fraction=0.1):
    """Hold out the last ``fraction`` of samples, by index, for validation."""
    n_val = int(round(len(y) * fraction))
    cut = len(y) - n_val
    return X[:cut], y[:cut], X[cut:], y[cut:]
