"""
Datasets for split training and the attack testbed.

  blobs          8-d Gaussian clusters. Labels: class (4), parity (2) and
                 quadrant (4). Quadrant is read off the signs of the two
                 noise dims, so it is independent of class.
  stripes-image  16x16x1 sinusoidal stripes; class = orientation (4),
                 frequency = stripe density (2). Pixels in [0, 1].
  cifar10        the public binary batch format (3073-byte records).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tools import numcore as nc

log = logging.getLogger("nopeek.datasets")

CIFAR_RECORD = 3073
CIFAR_SHAPE = (32, 32, 3)
STRIPES_SIDE = 16
BLOBS_DIM = 8


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not match its format."""

    def __init__(self, message: str, path: str | Path | None = None):
        super().__init__(message)
        self.path = path


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    X: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    image_shape: tuple[int, int, int] | None = None  # (h, w, c)
    layout: str = "flat"  # "hwc", "chw" (channel-planar), or "flat"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        n = self.X.shape[0]
        for attr, y in self.labels.items():
            if y.shape[0] != n:
                raise nc.DimensionError(f"labels {attr!r} have {y.shape[0]} rows, X has {n}")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != self.X.shape[1]:
            raise nc.DimensionError(
                f"image shape {self.image_shape} does not fit {self.X.shape[1]} columns"
            )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def is_normalized(self) -> bool:
        return self.mean is not None

    def standardized(self) -> Dataset:
        """Per-feature zero mean / unit variance; constant features keep std 1."""
        if self.is_normalized:
            return self
        mean = self.X.mean(axis=0, keepdims=True)
        std = self.X.std(axis=0, keepdims=True)
        std = np.where(std > 1e-12, std, 1.0)
        return replace(self, X=(self.X - mean) / std, mean=mean, std=std)

    def denormalize(self, X) -> np.ndarray:
        X = nc.as_matrix(X)
        if not self.is_normalized:
            return X
        return X * self.std + self.mean

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], labels={k: v[idx] for k, v in self.labels.items()})

    def as_images(self, X=None) -> np.ndarray:
        """(n, h, w, c) view of raw-scale rows."""
        if self.image_shape is None:
            raise nc.DimensionError(f"dataset {self.name!r} has no image shape")
        X = self.denormalize(self.X if X is None else X)
        h, w, c = self.image_shape
        if self.layout == "chw":
            return X.reshape(-1, c, h, w).transpose(0, 2, 3, 1)
        return X.reshape(-1, h, w, c)


def one_hot(indices, k: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= k):
        raise ValueError(f"label index out of range [0, {k})")
    out = np.zeros((indices.shape[0], k))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


# ---------------------------------------------------------------------------
# Synthetic
# ---------------------------------------------------------------------------


def _blobs(n: int, rng: nc.Rng, separation: float) -> Dataset:
    classes = rng.integers(0, 4, n)
    X = rng.normal(n, BLOBS_DIM)
    centers = np.zeros((4, BLOBS_DIM))
    # four orthogonal centers in dims 2..5, pairwise `separation` apart
    centers[np.arange(4), np.arange(4) + 2] = separation / np.sqrt(2.0)
    X += centers[classes]
    quadrant = (X[:, 0] > 0).astype(int) * 2 + (X[:, 1] > 0).astype(int)
    return Dataset(
        name="blobs",
        X=X,
        labels={
            "class": one_hot(classes, 4),
            "parity": one_hot(classes % 2, 2),
            "quadrant": one_hot(quadrant, 4),
        },
    )


def _stripes(n: int, rng: nc.Rng) -> Dataset:
    side = STRIPES_SIDE
    orientation = rng.integers(0, 4, n)
    frequency = rng.integers(0, 2, n)
    phase = rng.uniform(n, 1, 0.0, 2 * np.pi)[:, 0]
    noise = rng.normal(n, side * side, 0.0, 0.05)

    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    theta = orientation * (np.pi / 4)
    cycles = np.where(frequency == 0, 2.0, 4.0)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy) / side
    images = 0.5 + 0.5 * np.sin(2 * np.pi * cycles[:, None, None] * proj + phase[:, None, None])
    X = np.clip(images.reshape(n, side * side) + noise, 0.0, 1.0)
    return Dataset(
        name="stripes-image",
        X=X,
        labels={"class": one_hot(orientation, 4), "frequency": one_hot(frequency, 2)},
        image_shape=(side, side, 1),
        layout="hwc",
    )


def gen_synthetic(kind: str, n: int, seed: int, *, separation: float = 10.0) -> Dataset:
    """Deterministic synthetic dataset; `separation` is in units of the cluster sigma."""
    if n < 4:
        raise ValueError(f"need n >= 4, got {n}")
    rng = nc.Rng(seed).substream(f"data:{kind}")
    if kind == "blobs":
        return _blobs(n, rng, separation)
    if kind == "stripes-image":
        return _stripes(n, rng)
    raise ValueError(f"unknown synthetic dataset {kind!r}")


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------


def load_cifar10_bin(path: str | Path) -> Dataset:
    """
    Read a CIFAR-10 binary batch: per record one label byte then 3072 pixel
    bytes, channel-planar (all R, then G, then B). Pixels are scaled to [0, 1].

    Raises:
        DatasetFormatError: empty file, size not a multiple of 3073, or label > 9.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw or len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records", path
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range", path)
    log.info("loaded %d CIFAR-10 records from %s", records.shape[0], path)
    return Dataset(
        name="cifar10",
        X=records[:, 1:].astype(np.float64) / 255.0,
        labels={"class": one_hot(labels, 10)},
        image_shape=CIFAR_SHAPE,
        layout="chw",
    )


def write_cifar10_bin(path: str | Path, pixels: np.ndarray, labels) -> Path:
    """Inverse of load_cifar10_bin for uint8 pixels (n x 3072, channel-planar)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    path = Path(path)
    path.write_bytes(np.hstack([labels, pixels]).tobytes())
    return path


# ---------------------------------------------------------------------------
# Persistence and splits
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"X": ds.X, "name": np.array(ds.name), "layout": np.array(ds.layout)}
    if ds.image_shape is not None:
        arrays["image_shape"] = np.array(ds.image_shape)
    if ds.is_normalized:
        arrays["mean"], arrays["std"] = ds.mean, ds.std
    for attr, y in ds.labels.items():
        arrays[f"label:{attr}"] = y
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            labels = {k.split(":", 1)[1]: z[k] for k in z.files if k.startswith("label:")}
            shape = tuple(int(v) for v in z["image_shape"]) if "image_shape" in z.files else None
            return Dataset(
                name=str(z["name"]),
                X=z["X"],
                labels=labels,
                image_shape=shape,
                layout=str(z["layout"]),
                mean=z["mean"] if "mean" in z.files else None,
                std=z["std"] if "std" in z.files else None,
            )
    except (OSError, KeyError, ValueError) as e:
        raise DatasetFormatError(f"{path}: not a dataset archive ({e})", path) from e


def load_any(path: str | Path) -> Dataset:
    """Dataset archive (.npz) or CIFAR-10 binary batch (.bin)."""
    path = Path(path)
    if path.suffix == ".bin":
        return load_cifar10_bin(path)
    return load_dataset(path)


def train_test_split(ds: Dataset, train_fraction: float, rng: nc.Rng) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = rng.permutation(ds.n)
    cut = int(round(train_fraction * ds.n))
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))
