"""CIFAR binary loading, crop/flip augmentation and synthetic image datasets."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import load_tensors, save_tensors

CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)
CIFAR100_TRAIN = ("train.bin",)
CIFAR100_TEST = ("test.bin",)
_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}
PIXELS = 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64, normalized
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str
    mean: np.ndarray    # per-channel stats used for normalization
    std: np.ndarray

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def denormalize(self) -> np.ndarray:
        return self.images * self.std[None, :, None, None] + self.mean[None, :, None, None]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split, self.mean, self.std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def _normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def record_size(variant: str) -> int:
    if variant == "cifar10":
        return 1 + PIXELS
    if variant == "cifar100":
        return 2 + PIXELS
    raise ValueError(f"unknown CIFAR variant {variant!r}")


def read_cifar_records(path, variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Decode one binary batch file to (uint8 pixels (N, 3, 32, 32), int64 labels)."""
    size = record_size(variant)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % size:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {size}-byte {variant} record")
    rec = raw.reshape(-1, size)
    # CIFAR-100 records carry (coarse, fine); the fine label is the class
    labels = rec[:, size - PIXELS - 1].astype(np.int64)
    pixels = rec[:, size - PIXELS:].reshape(-1, 3, 32, 32)
    return pixels, labels


def write_cifar_records(path, pixels: np.ndarray, labels, variant: str, coarse=None) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if variant == "cifar10":
        rec = np.concatenate([labels, pixels], axis=1)
    else:
        coarse = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8).reshape(-1, 1)
        rec = np.concatenate([coarse, labels, pixels], axis=1)
    rec.tofile(path)


def _locate(directory: Path, variant: str, names) -> list[Path]:
    for base in (directory, directory / _SUBDIRS[variant]):
        paths = [base / n for n in names]
        if all(p.is_file() for p in paths):
            return paths
    raise FileNotFoundError(f"{variant} files not found under {directory}; expected {list(names)}")


def load_cifar(directory, variant: str = "cifar10", *, train_limit: int | None = None,
               test_limit: int | None = None) -> tuple[Dataset, Dataset]:
    """Load train/test splits scaled to [0, 1] and normalized with train-split channel stats."""
    directory = Path(directory)
    train_names, test_names = (CIFAR10_TRAIN, CIFAR10_TEST) if variant == "cifar10" else (CIFAR100_TRAIN, CIFAR100_TEST)
    num_classes = 10 if variant == "cifar10" else 100

    def read(names, limit):
        parts = [read_cifar_records(p, variant) for p in _locate(directory, variant, names)]
        px = np.concatenate([p for p, _ in parts])
        lb = np.concatenate([label for _, label in parts])
        if limit is not None:
            px, lb = px[:limit], lb[:limit]
        return px.astype(np.float64) / 255.0, lb

    tr_x, tr_y = read(train_names, train_limit)
    te_x, te_y = read(test_names, test_limit)
    mean, std = channel_stats(tr_x)
    return (
        Dataset(_normalize(tr_x, mean, std), tr_y, num_classes, "train", mean, std),
        Dataset(_normalize(te_x, mean, std), te_y, num_classes, "test", mean, std),
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def crop_flip(images: np.ndarray, offsets: np.ndarray, flips: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop at per-sample (dy, dx) offsets, then mirror where ``flips``."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else images
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    n = len(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    return crop_flip(images, offsets, flips, pad)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Partition ``range(n)`` into batches (shuffled when ``rng`` is given).

    A trailing batch of one sample is merged into its predecessor so batch
    statistics stay defined.
    """
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _blob_prototypes(rng, num_classes, channels, size, blobs):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.zeros((num_classes, channels, size, size))
    for c in range(num_classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, size, 2)
            sigma = rng.uniform(size / 10, size / 5)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            protos[c] += rng.standard_normal(channels)[:, None, None] * bump
        protos[c] /= np.sqrt(np.mean(protos[c] ** 2))
    return protos


def _grouped(protos, shared, groups, share):
    # class c sits in group c % groups; mixing two unit-RMS patterns keeps RMS near 1
    out = np.sqrt(share) * shared[np.arange(len(protos)) % groups] + np.sqrt(1 - share) * protos
    return out / np.sqrt(np.mean(out ** 2, axis=(1, 2, 3), keepdims=True))


def synthetic_dataset(num_classes: int = 10, per_class: int = 100, *, image_size: int = 16, channels: int = 3,
                      margin: float = 1.0, noise: float = 1.0, jitter: int = 2, blobs: int = 3,
                      test_per_class: int | None = None, label_noise: float = 0.0, groups: int = 0,
                      group_share: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-conditional Gaussian-blob images.

    Each class owns a prototype made of random coloured Gaussian bumps,
    scaled to unit RMS.  A sample is ``margin * prototype`` shifted by up to
    ``jitter`` pixels plus i.i.d. ``noise``.  ``label_noise`` flips that
    fraction of *training* labels uniformly at random.

    With ``groups > 0`` classes fall into superclasses (class ``c`` in group
    ``c % groups``) and each prototype mixes a shared group pattern, weighted
    by ``group_share``, with its own; same-group classes then look alike.
    """
    if num_classes < 2 or per_class < 1 or image_size < 2 or channels < 1:
        raise ValueError("synthetic_dataset needs num_classes >= 2, per_class >= 1, image_size >= 2, channels >= 1")
    if margin < 0 or noise < 0 or jitter < 0 or not 0 <= label_noise < 1:
        raise ValueError("margin, noise, jitter must be >= 0 and label_noise in [0, 1)")
    if groups < 0 or groups > num_classes or not 0 <= group_share < 1:
        raise ValueError("groups must be in [0, num_classes] and group_share in [0, 1)")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    protos = _blob_prototypes(rng, num_classes, channels, image_size, blobs)
    if groups:
        shared = _blob_prototypes(rng, groups, channels, image_size, blobs)
        protos = _grouped(protos, shared, groups, group_share)

    def draw(n_per):
        labels = np.repeat(np.arange(num_classes), n_per)
        shifts = rng.integers(-jitter, jitter + 1, size=(labels.size, 2))
        x = np.empty((labels.size, channels, image_size, image_size))
        for i, (c, (dy, dx)) in enumerate(zip(labels, shifts)):
            x[i] = np.roll(protos[c], (dy, dx), axis=(1, 2))
        x = margin * x + noise * rng.standard_normal(x.shape)
        order = rng.permutation(labels.size)
        return x[order], labels[order]

    tr_x, tr_y = draw(per_class)
    te_x, te_y = draw(test_per_class)
    if label_noise > 0:
        flip = rng.random(tr_y.size) < label_noise
        tr_y = np.where(flip, rng.integers(0, num_classes, tr_y.size), tr_y)
    mean, std = channel_stats(tr_x)
    return (
        Dataset(_normalize(tr_x, mean, std), tr_y.astype(np.int64), num_classes, "train", mean, std),
        Dataset(_normalize(te_x, mean, std), te_y.astype(np.int64), num_classes, "test", mean, std),
    )


def save_dataset(path, ds: Dataset) -> None:
    save_tensors(path, {
        "images": ds.images,
        "labels": ds.labels.astype(np.float64),
        "mean": ds.mean,
        "std": ds.std,
        "num_classes": np.array(float(ds.num_classes)),
        "is_train": np.array(1.0 if ds.split == "train" else 0.0),
    })


def load_dataset(path) -> Dataset:
    t = load_tensors(path)
    return Dataset(t["images"], t["labels"].astype(np.int64), int(t["num_classes"]),
                   "train" if t["is_train"] > 0.5 else "test", t["mean"], t["std"])


def data_root(config_path: str | None) -> Path | None:
    """Config value wins; ``DIVKD_DATA_ROOT`` is the fallback."""
    if config_path:
        return Path(config_path)
    env = os.environ.get("DIVKD_DATA_ROOT")
    return Path(env) if env else None
