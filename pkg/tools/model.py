"""
Split classifier: a layer stack cut at `split_index` into a client part and a
server part, with one or more named output heads on top.

Layers are 1-indexed for the split: Z is the output of layer `split_index`.
Parameters are leaf tensors; every forward pass records a fresh graph.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from tools import numcore as nc
from tools.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ADAM_LR,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    LR_DECAY,
)

log = logging.getLogger("nopeek.model")


class LabelError(ValueError):
    """Raised when a label matrix is not one-hot."""


class CheckpointError(ValueError):
    """Raised when a model checkpoint cannot be read."""


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------


class LayerKind(str, Enum):
    DENSE = "dense"
    RELU = "relu"
    PATCH_DENSE = "patch-dense"
    FLATTEN = "flatten"


_KIND_CODES = {
    LayerKind.DENSE: 0,
    LayerKind.RELU: 1,
    LayerKind.PATCH_DENSE: 2,
    LayerKind.FLATTEN: 3,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class PatchGeometry:
    """Locally connected layer geometry; input is (height, width, channels) row-major."""

    height: int
    width: int
    channels: int
    kernel: int
    stride: int
    out_channels: int

    @property
    def out_height(self) -> int:
        return (self.height - self.kernel) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width - self.kernel) // self.stride + 1

    @property
    def in_dim(self) -> int:
        return self.height * self.width * self.channels

    @property
    def out_dim(self) -> int:
        return self.out_height * self.out_width * self.out_channels

    def mask(self) -> np.ndarray:
        """in_dim x out_dim 0/1 matrix: output unit sees only its patch."""
        m = np.zeros((self.in_dim, self.out_dim))
        for oy in range(self.out_height):
            for ox in range(self.out_width):
                cols = [(oy * self.out_width + ox) * self.out_channels + oc
                        for oc in range(self.out_channels)]
                for ky in range(self.kernel):
                    for kx in range(self.kernel):
                        y, x = oy * self.stride + ky, ox * self.stride + kx
                        for ch in range(self.channels):
                            m[(y * self.width + x) * self.channels + ch, cols] = 1.0
        return m


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    seed: int = 0
    patch: PatchGeometry | None = None

    def __post_init__(self):
        if self.kind in (LayerKind.RELU, LayerKind.FLATTEN) and self.in_dim != self.out_dim:
            raise nc.DimensionError(f"{self.kind.value} layer must keep its width")
        if self.kind is LayerKind.PATCH_DENSE:
            if self.patch is None:
                raise nc.DimensionError("patch-dense layer needs a PatchGeometry")
            if (self.patch.in_dim, self.patch.out_dim) != (self.in_dim, self.out_dim):
                raise nc.DimensionError(
                    f"patch geometry gives {self.patch.in_dim}->{self.patch.out_dim}, "
                    f"declared {self.in_dim}->{self.out_dim}"
                )


class Layer:
    def __init__(self, spec: LayerSpec, params: dict[str, nc.Tensor] | None = None, rng=None):
        self.spec = spec
        self.params: dict[str, nc.Tensor] = {}
        self._mask: np.ndarray | None = None
        if spec.kind is LayerKind.PATCH_DENSE:
            self._mask = spec.patch.mask()
        if spec.kind in (LayerKind.DENSE, LayerKind.PATCH_DENSE):
            if params is None:
                params = _init_dense(spec, rng)
            self.params = params

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        kind = self.spec.kind
        if x.shape[1] != self.spec.in_dim:
            raise nc.DimensionError(
                f"{kind.value} layer expects {self.spec.in_dim} columns, got {x.shape[1]}",
                (x.shape,),
            )
        if kind is LayerKind.RELU:
            return nc.relu(x)
        if kind is LayerKind.FLATTEN:
            return x
        W = self.params["W"]
        if self._mask is not None:
            W = W * self._mask
        return nc.add_row(x @ W, self.params["b"])


def _init_dense(spec: LayerSpec, rng: nc.Rng | None) -> dict[str, nc.Tensor]:
    rng = rng or nc.Rng(spec.seed)
    fan_in = spec.patch.kernel**2 * spec.patch.channels if spec.patch else spec.in_dim
    W = rng.normal(spec.in_dim, spec.out_dim, 0.0, np.sqrt(2.0 / fan_in))
    return {"W": nc.parameter(W, "W"), "b": nc.parameter(np.zeros((1, spec.out_dim)), "b")}


@dataclass
class Head:
    name: str
    classes: int
    W: nc.Tensor
    b: nc.Tensor

    def __call__(self, h: nc.Tensor) -> nc.Tensor:
        return nc.add_row(h @ self.W, self.b)


# ---------------------------------------------------------------------------
# Split model
# ---------------------------------------------------------------------------


class SplitModel:
    """Ordered layers, a split point, and named heads on the last shared layer."""

    def __init__(self, layers: list[Layer], split_index: int, heads: dict[str, Head]):
        if not 1 <= split_index < len(layers):
            raise nc.DimensionError(
                f"split_index must be in [1, {len(layers) - 1}], got {split_index}"
            )
        if not heads:
            raise nc.DimensionError("at least one head is required")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.spec.out_dim != nxt.spec.in_dim:
                raise nc.DimensionError(
                    f"layer dims do not chain: {prev.spec.out_dim} -> {nxt.spec.in_dim}"
                )
        self.layers = layers
        self.split_index = split_index
        self.heads = heads

    @classmethod
    def build(
        cls,
        specs: Sequence[LayerSpec],
        split_index: int,
        head_classes: Mapping[str, int],
        rng: nc.Rng,
    ) -> SplitModel:
        layers = [Layer(spec, rng=rng.substream(f"layer{i}")) for i, spec in enumerate(specs)]
        width = specs[-1].out_dim
        heads = {}
        for name, classes in head_classes.items():
            hr = rng.substream(f"head:{name}")
            W = hr.normal(width, classes, 0.0, np.sqrt(1.0 / width))
            heads[name] = Head(name, classes, nc.parameter(W, f"{name}.W"),
                               nc.parameter(np.zeros((1, classes)), f"{name}.b"))
        return cls(layers, split_index, heads)

    @property
    def input_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def split_dim(self) -> int:
        return self.layers[self.split_index - 1].spec.out_dim

    def client_parameters(self) -> list[nc.Tensor]:
        return [p for layer in self.layers[: self.split_index] for p in layer.params.values()]

    def server_parameters(self) -> list[nc.Tensor]:
        params = [p for layer in self.layers[self.split_index:] for p in layer.params.values()]
        for head in self.heads.values():
            params.extend((head.W, head.b))
        return params

    def parameters(self) -> list[nc.Tensor]:
        return self.client_parameters() + self.server_parameters()

    def layer_outputs(self, X) -> list[nc.Tensor]:
        """Outputs of every client layer, in order (used for per-layer leakage)."""
        h = X if isinstance(X, nc.Tensor) else nc.Tensor(X)
        outs = []
        for layer in self.layers[: self.split_index]:
            h = layer(h)
            outs.append(h)
        return outs


def forward_client(m: SplitModel, X) -> nc.Tensor:
    h = X if isinstance(X, nc.Tensor) else nc.Tensor(X)
    if h.shape[1] != m.input_dim:
        raise nc.DimensionError(f"input has {h.shape[1]} columns, model expects {m.input_dim}")
    for layer in m.layers[: m.split_index]:
        h = layer(h)
    return h


def forward_server(m: SplitModel, Z) -> dict[str, nc.Tensor]:
    h = Z if isinstance(Z, nc.Tensor) else nc.Tensor(Z)
    for layer in m.layers[m.split_index:]:
        h = layer(h)
    return {name: head(h) for name, head in m.heads.items()}


def forward(m: SplitModel, X) -> dict[str, nc.Tensor]:
    """Unsplit forward pass."""
    return forward_server(m, forward_client(m, X))


def _layer_seed(seed: int, offset: int) -> int:
    return (seed + offset) % 2**64  # stored as u64 in checkpoints


def default_layer_specs(
    input_dim: int,
    hidden: Sequence[int] = (256, 64, 32),
    seed: int = 0,
) -> tuple[list[LayerSpec], int]:
    """flatten -> dense -> relu -> dense -> relu [split] -> dense -> relu."""
    h1, h2, h3 = hidden
    specs = [
        LayerSpec(LayerKind.FLATTEN, input_dim, input_dim),
        LayerSpec(LayerKind.DENSE, input_dim, h1, seed=_layer_seed(seed, 1)),
        LayerSpec(LayerKind.RELU, h1, h1),
        LayerSpec(LayerKind.DENSE, h1, h2, seed=_layer_seed(seed, 3)),
        LayerSpec(LayerKind.RELU, h2, h2),
        LayerSpec(LayerKind.DENSE, h2, h3, seed=_layer_seed(seed, 5)),
        LayerSpec(LayerKind.RELU, h3, h3),
    ]
    return specs, 5


def image_layer_specs(
    image_shape: tuple[int, int, int],
    hidden: Sequence[int] = (256, 64, 32),
    seed: int = 0,
    kernel: int = 3,
    out_channels: int = 3,
) -> tuple[list[LayerSpec], int]:
    """Like default_layer_specs, but the first dense layer sees local patches only.

    The patch layer's output keeps a spatial (h, w, c) layout, which is what
    activation dumps render.
    """
    h, w, c = image_shape
    geom = PatchGeometry(h, w, c, kernel, 1, out_channels)
    _, h2, h3 = hidden
    specs = [
        LayerSpec(LayerKind.FLATTEN, geom.in_dim, geom.in_dim),
        LayerSpec(LayerKind.PATCH_DENSE, geom.in_dim, geom.out_dim, seed=_layer_seed(seed, 1),
                  patch=geom),
        LayerSpec(LayerKind.RELU, geom.out_dim, geom.out_dim),
        LayerSpec(LayerKind.DENSE, geom.out_dim, h2, seed=_layer_seed(seed, 3)),
        LayerSpec(LayerKind.RELU, h2, h2),
        LayerSpec(LayerKind.DENSE, h2, h3, seed=_layer_seed(seed, 5)),
        LayerSpec(LayerKind.RELU, h3, h3),
    ]
    return specs, 5


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def check_one_hot(y: np.ndarray) -> None:
    ok = np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)
    if not ok:
        raise LabelError("labels must be one-hot rows")


def cce(logits: nc.Tensor, y_true) -> nc.Tensor:
    """Mean categorical cross-entropy of softmax(logits) against one-hot labels."""
    y = nc.as_matrix(y_true, name="y_true")
    if y.shape != logits.shape:
        raise nc.DimensionError(f"cce: logits {logits.shape} vs labels {y.shape}")
    check_one_hot(y)
    return nc.softmax_cross_entropy(logits, y)


def multi_head_cce(logits: Mapping[str, nc.Tensor], y_true: Mapping[str, np.ndarray]) -> nc.Tensor:
    """Sum of per-head CCE, in head order."""
    total = None
    for name, out in logits.items():
        term = cce(out, y_true[name])
        total = term if total is None else total + term
    if total is None:
        raise nc.ContractError("no heads to score")
    return total


def accuracy(logits: nc.Tensor | np.ndarray, y_true: np.ndarray) -> float:
    values = logits.value if isinstance(logits, nc.Tensor) else logits
    return float(np.mean(values.argmax(axis=1) == np.asarray(y_true).argmax(axis=1)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    params: list[nc.Tensor]
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    decay: float = LR_DECAY
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in self.params]
            self.v = [np.zeros_like(p.value) for p in self.params]

    def end_epoch(self) -> None:
        self.lr *= self.decay


def adam_step(state: AdamState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update; grads default to each parameter's `.grad`."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in state.params]
    if len(grads) != len(state.params):
        raise nc.DimensionError(f"{len(grads)} grads for {len(state.params)} parameters")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for i, (p, g) in enumerate(zip(state.params, grads)):
        if g.shape != p.value.shape:
            raise nc.DimensionError(f"grad {g.shape} does not match parameter {p.value.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        # new array, so graphs that captured the old value stay consistent
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoint (NPKM)
# ---------------------------------------------------------------------------

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_LAYER = struct.Struct("<BIIQ")
_PATCH = struct.Struct("<6I")
_SHAPE = struct.Struct("<II")


def _write_matrix(buf: bytearray, m: np.ndarray) -> None:
    buf += _SHAPE.pack(*m.shape)
    buf += np.ascontiguousarray(m, dtype="<f8").tobytes()


def _read_matrix(data: memoryview, pos: int) -> tuple[np.ndarray, int]:
    rows, cols = _SHAPE.unpack_from(data, pos)
    pos += _SHAPE.size
    size = rows * cols * 8
    if pos + size > len(data):
        raise CheckpointError("truncated matrix")
    m = np.frombuffer(data[pos:pos + size], dtype="<f8").astype(np.float64).reshape(rows, cols)
    return m, pos + size


def encode_checkpoint(m: SplitModel) -> bytes:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += _U16.pack(CHECKPOINT_VERSION)
    buf += _U32.pack(len(m.layers))
    for layer in m.layers:
        s = layer.spec
        buf += _LAYER.pack(_KIND_CODES[s.kind], s.in_dim, s.out_dim, s.seed)
        buf += bytes([1 if s.patch else 0])
        if s.patch:
            p = s.patch
            buf += _PATCH.pack(p.height, p.width, p.channels, p.kernel, p.stride, p.out_channels)
    buf += _U32.pack(m.split_index)
    buf += _U32.pack(len(m.heads))
    for head in m.heads.values():
        name = head.name.encode("utf-8")
        buf += _U16.pack(len(name)) + name + _U32.pack(head.classes)
    for p in m.parameters():
        _write_matrix(buf, p.value)
    return bytes(buf)


def decode_checkpoint(blob: bytes) -> SplitModel:
    data = memoryview(blob)
    try:
        if bytes(data[:4]) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = _U16.unpack_from(data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 6
        (n_layers,) = _U32.unpack_from(data, pos)
        pos += 4
        specs = []
        for _ in range(n_layers):
            code, in_dim, out_dim, seed = _LAYER.unpack_from(data, pos)
            pos += _LAYER.size
            has_patch = data[pos]
            pos += 1
            patch = None
            if has_patch:
                patch = PatchGeometry(*_PATCH.unpack_from(data, pos))
                pos += _PATCH.size
            specs.append(LayerSpec(_CODE_KINDS[code], in_dim, out_dim, seed, patch))
        (split_index,) = _U32.unpack_from(data, pos)
        (n_heads,) = _U32.unpack_from(data, pos + 4)
        pos += 8
        head_meta = []
        for _ in range(n_heads):
            (name_len,) = _U16.unpack_from(data, pos)
            pos += 2
            name = bytes(data[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (classes,) = _U32.unpack_from(data, pos)
            pos += 4
            head_meta.append((name, classes))

        layers = []
        for spec in specs:
            params = None
            if spec.kind in (LayerKind.DENSE, LayerKind.PATCH_DENSE):
                W, pos = _read_matrix(data, pos)
                b, pos = _read_matrix(data, pos)
                params = {"W": nc.parameter(W, "W"), "b": nc.parameter(b, "b")}
            layers.append(Layer(spec, params=params))
        heads = {}
        for name, classes in head_meta:
            W, pos = _read_matrix(data, pos)
            b, pos = _read_matrix(data, pos)
            heads[name] = Head(name, classes, nc.parameter(W, f"{name}.W"),
                               nc.parameter(b, f"{name}.b"))
    except (struct.error, KeyError, IndexError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint")
    return SplitModel(layers, split_index, heads)


def save_checkpoint(m: SplitModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(m))
    log.info("saved checkpoint %s (%d parameters)", path, len(m.parameters()))
    return path


def load_checkpoint(path: str | Path) -> SplitModel:
    return decode_checkpoint(Path(path).read_bytes())
