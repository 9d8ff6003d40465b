"""
Reconstruction-attack testbed.

The attacker holds leaked (Z, x) pairs from the defended model's held-out
data, trains a decoder Z -> x on 90% of them and is scored by the L2 error
of its reconstructions on the other 10%. It never reads defended-model
parameters; `harvest_pairs` is its only contact with the model.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from tools import numcore as nc
from tools.config import (
    ATTACK_BATCH,
    ATTACK_EPOCHS,
    ATTACK_LR,
    ATTACK_TRAIN_FRACTION,
    LR_DECAY,
    PAIRS_MAGIC,
)
from tools.model import (
    AdamState,
    Layer,
    LayerKind,
    LayerSpec,
    SplitModel,
    adam_step,
    forward_client,
)
from tools.wire import WireError, decode_tensors, encode_tensor

log = logging.getLogger("nopeek.attack")

_COUNT = struct.Struct("<I")


class PairFileError(ValueError):
    """Raised when an NPKP pair file is truncated or malformed."""


class AttackTrainingError(RuntimeError):
    """Raised when the attacker's training loss diverges."""

    def __init__(self, message: str, epoch: int, loss: float):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss


# ---------------------------------------------------------------------------
# Pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LeakedPairSet:
    Z_train: np.ndarray
    X_train: np.ndarray
    Z_test: np.ndarray
    X_test: np.ndarray
    leak_fraction: float = 1.0
    seed: int = 0

    @property
    def dz(self) -> int:
        return self.Z_train.shape[1]

    @property
    def d(self) -> int:
        return self.X_train.shape[1]

    @classmethod
    def from_arrays(
        cls,
        Z,
        X,
        *,
        seed: int = 0,
        leak_fraction: float = 1.0,
        train_fraction: float = ATTACK_TRAIN_FRACTION,
    ) -> LeakedPairSet:
        """
        Seeded split into attacker-train / attacker-test.

        The test rows depend only on the seed; `leak_fraction` keeps that share
        of the train rows, so sweeps over it score against the same test set.
        """
        Z, X = nc.as_matrix(Z, name="Z"), nc.as_matrix(X, name="X")
        n = Z.shape[0]
        if n != X.shape[0]:
            raise nc.DimensionError(f"{n} activations for {X.shape[0]} inputs")
        if n < 2:
            raise ValueError(f"need at least 2 pairs to split, got {n}")
        if not 0.0 < leak_fraction <= 1.0:
            raise ValueError(f"leak_fraction must be in (0, 1], got {leak_fraction}")
        order = nc.Rng(seed).substream("attack:split").permutation(n)
        cut = min(max(int(round(train_fraction * n)), 1), n - 1)
        train, test = order[:cut], order[cut:]
        train = train[: max(1, int(round(leak_fraction * len(train))))]
        return cls(Z[train], X[train], Z[test], X[test], leak_fraction, seed)


def harvest_pairs(
    model: SplitModel, X, *, seed: int = 0, leak_fraction: float = 1.0
) -> LeakedPairSet:
    """Activations of the defended client layers on held-out X, paired with X."""
    X = nc.as_matrix(X, name="X")
    if X.shape[0] == 0:
        raise ValueError("no held-out data to harvest")
    Z = forward_client(model, X).value
    return LeakedPairSet.from_arrays(Z, X, seed=seed, leak_fraction=leak_fraction)


def save_pairs(Z, X, path: str | Path) -> Path:
    """NPKP file: magic, u32 count, then per pair the Z row and x row as wire tensors."""
    Z, X = nc.as_matrix(Z), nc.as_matrix(X)
    buf = bytearray(PAIRS_MAGIC)
    buf += _COUNT.pack(Z.shape[0])
    for z, x in zip(Z, X):
        buf += encode_tensor(np.ascontiguousarray(z, dtype="<f8"))
        buf += encode_tensor(np.ascontiguousarray(x, dtype="<f8"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))
    return path


def load_pairs(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != PAIRS_MAGIC or len(blob) < 8:
        raise PairFileError(f"{path}: not an NPKP pair file")
    (count,) = _COUNT.unpack_from(blob, 4)
    try:
        tensors = decode_tensors(memoryview(blob)[8:])
    except WireError as e:
        raise PairFileError(f"{path}: corrupt pair file ({e})") from e
    if len(tensors) != 2 * count:
        raise PairFileError(f"{path}: header says {count} pairs, found {len(tensors) / 2}")
    Z = np.stack([t.astype(np.float64) for t in tensors[0::2]]) if count else np.zeros((0, 0))
    X = np.stack([t.astype(np.float64) for t in tensors[1::2]]) if count else np.zeros((0, 0))
    return Z, X


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def decoder_widths(dz: int, d: int) -> list[int]:
    """dz, 2dz, 4dz, ... while still below d; one more stage per doubling of the gap."""
    widths = [dz]
    while widths[-1] * 2 < d:
        widths.append(widths[-1] * 2)
    return widths


class Decoder:
    """Dense upsampling stack dz -> ... -> d; relu between stages, linear output."""

    def __init__(self, dz: int, d: int, rng: nc.Rng):
        widths = decoder_widths(dz, d)
        self.layers: list[Layer] = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            self.layers.append(Layer(LayerSpec(LayerKind.DENSE, a, b), rng=rng.substream(f"up{i}")))
            self.layers.append(Layer(LayerSpec(LayerKind.RELU, b, b)))
        self.layers.append(
            Layer(LayerSpec(LayerKind.DENSE, widths[-1], d), rng=rng.substream("out"))
        )
        self.dz, self.d = dz, d
        self.loss_history: list[float] = []

    def __call__(self, Z) -> nc.Tensor:
        h = Z if isinstance(Z, nc.Tensor) else nc.Tensor(Z)
        for layer in self.layers:
            h = layer(h)
        return h

    def parameters(self) -> list[nc.Tensor]:
        return [p for layer in self.layers for p in layer.params.values()]

    def reconstruct(self, Z) -> np.ndarray:
        return self(nc.as_matrix(Z)).value


def train_attacker(
    pairs: LeakedPairSet,
    epochs: int = ATTACK_EPOCHS,
    lr: float = ATTACK_LR,
    *,
    batch_size: int = ATTACK_BATCH,
    decay: float = LR_DECAY,
    seed: int = 0,
) -> Decoder:
    """Fit a decoder minimizing mean ||x - x_hat||^2 over the attacker-train pairs."""
    if pairs.Z_train.shape[0] == 0:
        raise ValueError("no attacker-train pairs")
    rng = nc.Rng(seed).substream("attacker")
    dec = Decoder(pairs.dz, pairs.d, rng.substream("init"))
    opt = AdamState(dec.parameters(), lr=lr, decay=decay)
    batch_rng = rng.substream("batches")
    n = pairs.Z_train.shape[0]
    for epoch in range(epochs):
        total = 0.0
        order = batch_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            diff = dec(pairs.Z_train[idx]) - pairs.X_train[idx]
            loss = nc.mean(nc.sum_squares(diff, axis=1))
            value = loss.item()
            if not math.isfinite(value):
                raise AttackTrainingError(
                    f"attacker loss diverged at epoch {epoch} (lr={opt.lr:.3g}, "
                    f"|Z|max={np.abs(pairs.Z_train).max():.3g})",
                    epoch, value,
                )
            nc.backward(loss)
            adam_step(opt)
            total += value * len(idx)
        dec.loss_history.append(total / n)
        opt.end_epoch()
    log.info("attacker trained: %d pairs, loss %.4f -> %.4f",
             n, dec.loss_history[0], dec.loss_history[-1])
    return dec


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass
class AttackReport:
    errors: list[float] = field(default_factory=list)  # per-sample L2 norm
    mean: float = 0.0
    median: float = 0.0
    q1: float = 0.0
    q3: float = 0.0
    mse: float = 0.0  # mean squared error per input element

    @classmethod
    def from_reconstruction(cls, X, X_hat) -> AttackReport:
        X, X_hat = nc.as_matrix(X), nc.as_matrix(X_hat)
        if X.shape != X_hat.shape:
            raise nc.DimensionError(f"reconstruction {X_hat.shape} vs input {X.shape}")
        diff = X - X_hat
        errors = np.sqrt(np.sum(diff * diff, axis=1))
        q1, median, q3 = np.percentile(errors, [25, 50, 75])
        return cls(
            errors=[float(e) for e in errors],
            mean=float(errors.mean()),
            median=float(median),
            q1=float(q1),
            q3=float(q3),
            mse=float(np.mean(diff * diff)),
        )

    def summary(self) -> dict:
        data = asdict(self)
        data.pop("errors")
        data["n"] = len(self.errors)
        return data

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["sample_id,l2_error"] + [f"{i},{e!r}" for i, e in enumerate(self.errors)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True), encoding="utf-8")
        return path


def evaluate_attack(dec: Decoder, pairs: LeakedPairSet) -> AttackReport:
    report = AttackReport.from_reconstruction(pairs.X_test, dec.reconstruct(pairs.Z_test))
    log.info("attack: mean L2 %.4f, mse %.5f over %d test pairs",
             report.mean, report.mse, len(report.errors))
    return report


def to_uint8(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> Path:
    """Binary P6 PPM; (h, w) or (h, w, 1) is replicated to RGB."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    if image.ndim != 3 or image.shape[2] not in (2, 3):
        raise nc.DimensionError(f"cannot render shape {image.shape} as RGB")
    if image.shape[2] == 2:
        image = np.concatenate([image, np.zeros(image.shape[:2] + (1,), image.dtype)], axis=2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.astype(np.uint8)).save(path, format="PPM")
    return path


def dump_reconstructions(dec: Decoder, pairs: LeakedPairSet, dataset, out_dir: str | Path,
                         limit: int = 16) -> list[Path]:
    """(x | x_hat) side by side per test pair, each half min-max scaled on its own."""
    out_dir = Path(out_dir)
    X_hat = dec.reconstruct(pairs.Z_test[:limit])
    originals = dataset.as_images(pairs.X_test[:limit])
    recons = dataset.as_images(X_hat)
    paths = []
    for i, (x, xh) in enumerate(zip(originals, recons)):
        pair = np.concatenate([to_uint8(x), to_uint8(xh)], axis=1)
        paths.append(write_ppm(out_dir / f"recon_{i:04d}.ppm", pair))
    return paths
