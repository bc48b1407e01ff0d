"""Dataset ingestion: CIFAR-10 binary batches and a planted-width synthetic task."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # [N, C, H, W] float64
    y: np.ndarray  # [N] int64

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or self.x.shape[0] != self.y.shape[0]:
            raise DataFormatError(f"inconsistent dataset shapes {self.x.shape} / {self.y.shape}")

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0


# CIFAR-10 ------------------------------------------------------------------

def read_cifar10_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch: uint8 images [N,3,32,32] and labels [N]."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = recs[:, 1:].reshape(-1, 3, 32, 32)
    log.info("read %d records from %s", len(labels), path)
    return images, labels


def normalize_cifar(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10(path: str | Path, subset: int | None = None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Load ``data_batch_*.bin`` / ``test_batch.bin`` from a directory.

    ``path`` may also name a single batch file, which is then used for both
    splits.  ``subset`` keeps the first n samples of each split after a seeded
    shuffle.
    """
    path = Path(path)
    if path.is_dir():
        train_files = sorted(path.glob("data_batch_*.bin"))
        test_files = sorted(path.glob("test_batch*.bin"))
        if not train_files:
            raise FileNotFoundError(f"no data_batch_*.bin under {path}")
        test_files = test_files or train_files[-1:]
    elif path.exists():
        train_files = test_files = [path]
    else:
        raise FileNotFoundError(path)

    def _load(files):
        parts = [read_cifar10_file(f) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    rng = np.random.default_rng(seed)
    out = []
    for files in (train_files, test_files):
        imgs, labels = _load(files)
        if subset is not None and subset < len(labels):
            keep = rng.permutation(len(labels))[:subset]
            imgs, labels = imgs[keep], labels[keep]
        out.append(Dataset(normalize_cifar(imgs), labels))
    return out[0], out[1]


def write_cifar10_file(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`read_cifar10_file`; used to build fixture files."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    recs.tofile(path)


# augmentation ----------------------------------------------------------------

@dataclass
class Augment:
    crop_pad: int = 0
    hflip: bool = False
    cutout: int = 0

    @property
    def active(self) -> bool:
        return bool(self.crop_pad or self.hflip or self.cutout)

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.active:
            return x
        n, _, h, w = x.shape
        out = x.copy()
        if self.crop_pad:
            p = self.crop_pad
            padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            dy = rng.integers(0, 2 * p + 1, n)
            dx = rng.integers(0, 2 * p + 1, n)
            for i in range(n):
                out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        if self.hflip:
            flip = rng.random(n) < 0.5
            out[flip] = out[flip, :, :, ::-1]
        if self.cutout:
            half = self.cutout // 2
            cy = rng.integers(0, h, n)
            cx = rng.integers(0, w, n)
            for i in range(n):
                out[i, :, max(0, cy[i] - half):cy[i] + half, max(0, cx[i] - half):cx[i] + half] = 0.0
        return out


CIFAR_AUGMENT = Augment(crop_pad=4, hflip=True, cutout=16)


# synthetic planted-knee task -----------------------------------------------

@dataclass
class SyntheticSpec:
    """Labels are the argmax of ``knee`` hidden projections of the input.

    Each sample draws a latent ``z ~ N(0, I_knee)``; every pixel carries
    ``V^T z`` (``V`` with orthonormal rows, ``in_channels`` wide) plus i.i.d.
    Gaussian noise of std ``noise``.  The label is ``argmax_j z_j``, so a
    network has to keep all ``knee`` latent directions alive through its
    narrowest layer.  ``noise = inf`` produces pure-noise inputs with shuffled
    labels.
    """

    knee: int = 8
    samples: int = 1024
    test_samples: int = 512
    noise: float = 0.5
    seed: int = 0
    in_channels: int = 16
    hw: tuple[int, int] = (4, 4)

    @property
    def classes(self) -> int:
        return self.knee if self.knee > 1 else 2


def synthetic_task(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    if spec.knee < 1:
        raise ValueError("knee must be >= 1")
    if spec.in_channels < spec.knee:
        raise ValueError(f"in_channels ({spec.in_channels}) must be >= knee ({spec.knee})")
    if spec.samples < 1 or spec.test_samples < 0:
        raise ValueError("sample counts must be positive")
    rng = np.random.default_rng(spec.seed)
    q, _ = np.linalg.qr(rng.standard_normal((spec.in_channels, spec.knee)))
    proj = q.T  # [knee, in_channels], orthonormal rows
    h, w = spec.hw

    def draw(n):
        if math.isinf(spec.noise):
            x = rng.standard_normal((n, spec.in_channels, h, w))
            y = rng.permutation(np.arange(n) % spec.classes)
            return Dataset(x, y)
        z = rng.standard_normal((n, spec.knee))
        if spec.knee == 1:
            y = (z[:, 0] > 0).astype(np.int64)
        else:
            y = np.argmax(z, axis=1)
        signal = z @ proj  # [n, in_channels]
        x = signal[:, :, None, None] + spec.noise * rng.standard_normal((n, spec.in_channels, h, w))
        return Dataset(x, y)

    return draw(spec.samples), draw(spec.test_samples)
