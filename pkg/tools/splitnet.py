"""
Split-learning session: client and server state machines over a Transport.

    client                                server
    [burn-in, no traffic]
    HELLO(dims, classes, seed) ────────▶  build the same model
                               ◀────────  HELLO(split width)
    per batch:
    ACTIVATION(Z, Y per head)  ────────▶  CCE, backprop to Z, adam
                               ◀────────  GRADIENT(dL/dZ)
    adam on client layers
    per epoch:
    EPOCH_END(epoch)           ────────▶
                               ◀────────  METRICS([epoch, loss, acc...])
    SHUTDOWN                   ────────▶

The client adds alpha1 * dcor(X, Z) (or dcor(S, Z) for a protected
attribute S) locally; by linearity its gradient is combined with the
returned dL/dZ at Z. X and S never cross the wire.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tools import numcore as nc
from tools.audit import log_event
from tools.burnin import BurninResult, prefit_client, run_burnin
from tools.config import SessionConfig, Settings
from tools.depmeasure import DegenerateVarianceError, dcor
from tools.model import (
    AdamState,
    SplitModel,
    accuracy,
    adam_step,
    default_layer_specs,
    forward_client,
    forward_server,
    image_layer_specs,
    load_checkpoint,
    multi_head_cce,
    save_checkpoint,
)
from tools.nopeek_loss import AttributeConfigError, batch_leakage
from tools.transport import LoopbackTransport, TrafficCapture, Transport
from tools.wire import DType, ErrorCode, MsgType, WireError, WireMessage, error_message

log = logging.getLogger("nopeek.splitnet")

EVAL_SAMPLES = 256


class ProtocolError(RuntimeError):
    """Raised when the peer breaks the session state machine."""

    def __init__(self, message: str, code: ErrorCode = ErrorCode.PROTOCOL):
        super().__init__(message)
        self.code = code


class SessionAbortedError(RuntimeError):
    """Raised on connection loss; the client state was saved to `checkpoint_path`."""

    def __init__(self, message: str, checkpoint_path: Path | None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


# ---------------------------------------------------------------------------
# Logs and live status
# ---------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    accuracy: dict[str, float]
    dcor_xz: float = float("nan")
    dcor_yz: float = float("nan")
    dcor_sz: float | None = None


@dataclass
class TrainingLog:
    role: str
    epochs: list[EpochMetrics] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    batch_dcor: list[float] = field(default_factory=list)
    metrics_frames: list[WireMessage] = field(default_factory=list)
    capture: TrafficCapture | None = None
    burnin: BurninResult | None = None
    model: SplitModel | None = None


@dataclass
class SessionStatus:
    """Read-only view of a server session, shared with the HTTP status app."""

    state: str = "idle"
    batches_seen: int = 0
    epochs: list[dict] = field(default_factory=list)
    error: str | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def update(self, **changes) -> None:
        with self._lock:
            for key, value in changes.items():
                setattr(self, key, value)

    def add_epoch(self, row: dict) -> None:
        with self._lock:
            self.epochs.append(row)

    def snapshot(self) -> dict:
        with self._lock:
            return {"state": self.state, "batches_seen": self.batches_seen,
                    "epochs": list(self.epochs), "error": self.error}


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def add_noise_baseline(Z, scale: float, rng: nc.Rng) -> np.ndarray:
    """Z + U(-scale, scale) elementwise; scale 0 returns Z unchanged."""
    Z = nc.as_matrix(Z, name="Z")
    if scale < 0:
        raise nc.ContractError(f"noise scale must be >= 0, got {scale}")
    if scale == 0:
        return Z.copy()
    return Z + nc.rng_uniform(rng, Z.shape[0], Z.shape[1], -scale, scale)


def iter_batches(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    """Consecutive index slices; a trailing batch of one row is dropped (dcor needs two)."""
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def build_session_model(
    cfg: SessionConfig,
    input_dim: int,
    image_shape: tuple[int, int, int] | None,
    head_classes: dict[str, int],
) -> SplitModel:
    """The model both peers derive from (config, seed, data dims)."""
    if cfg.patch_kernel and image_shape:
        specs, _ = image_layer_specs(image_shape, cfg.hidden, cfg.seed, cfg.patch_kernel,
                                     cfg.patch_channels)
    else:
        specs, _ = default_layer_specs(input_dim, cfg.hidden, cfg.seed)
    init = nc.Rng(cfg.seed).substream("init")
    return SplitModel.build(specs, cfg.split_index, head_classes, init)


def safe_dcor(X, Z) -> float:
    """dcor for reporting; a constant sample reads as 0."""
    try:
        return dcor(X, Z)
    except DegenerateVarianceError:
        log.warning("dcor undefined on a constant sample; reporting 0")
        return 0.0


def seed_words(seed: int) -> tuple[int, int]:
    """(high, low) u32 halves; each is exact in an f64 tensor."""
    return seed >> 32, seed & 0xFFFFFFFF


def hello_message(cfg: SessionConfig, dataset) -> WireMessage:
    """Client HELLO: data dims + image shape, classes per head, (seed hi, seed lo, split)."""
    h, w, c = dataset.image_shape or (0, 0, 0)
    return WireMessage.make(MsgType.HELLO, 0, [
        np.array([[dataset.X.shape[1], h, w, c]], dtype=float),
        np.array([[dataset.labels[head].shape[1] for head in cfg.heads]], dtype=float),
        np.array([[*seed_words(cfg.seed), cfg.split_index]], dtype=float),
    ], dtype=DType.F64)


def _expect(msg: WireMessage, msg_type: MsgType, batch_id: int | None = None) -> None:
    if msg.msg_type is MsgType.ERROR:
        raw = int(msg.tensors[0][0, 0]) if msg.tensors else int(ErrorCode.INTERNAL)
        code = ErrorCode(raw) if raw in ErrorCode._value2member_map_ else ErrorCode.INTERNAL
        raise ProtocolError(f"peer reported {code.name} (code {raw})", code)
    if msg.msg_type is not msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got {msg.msg_type.name}")
    if batch_id is not None and msg.batch_id != batch_id:
        raise ProtocolError(f"expected batch {batch_id}, got {msg.batch_id}")


def _try_send_error(transport: Transport, code: ErrorCode, batch_id: int = 0) -> None:
    try:
        transport.send(error_message(code, batch_id))
    except (OSError, WireError):
        pass


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


def _client_heads(cfg: SessionConfig, dataset) -> None:
    missing = [h for h in (*cfg.heads, cfg.protect) if h and h not in dataset.labels]
    if missing:
        raise AttributeConfigError(f"dataset {dataset.name!r} has no attribute(s) {missing}")
    if cfg.protect and cfg.skip_binary_protected and dataset.labels[cfg.protect].shape[1] == 2:
        raise AttributeConfigError(f"protected attribute {cfg.protect!r} is binary")


def client_burnin(model: SplitModel, cfg: SessionConfig, dataset) -> BurninResult:
    """Decorrelate Z from X on a local sample, then pull the client layers toward it."""
    n = min(cfg.burnin_samples, dataset.X.shape[0])
    X = dataset.X[:n]
    Y = dataset.labels[cfg.heads[0]][:n]
    Z0 = forward_client(model, X).value
    result = run_burnin(X, Y, Z0, iters=cfg.burnin_iters, mode=cfg.burnin_mode,
                        beta=cfg.burnin_beta)
    prefit_client(model, X, result.Z, lr=cfg.lr)
    return result


def _checkpoint_path(cfg: SessionConfig) -> Path:
    return Settings().checkpoint_dir / f"client-seed{cfg.seed}.npkm"


def run_client(
    cfg: SessionConfig,
    dataset,
    transport: Transport,
    *,
    resume: str | Path | None = None,
) -> TrainingLog:
    """
    Drive one training session from the data-holding side.

    Raises:
        SessionAbortedError: the connection dropped; the model was checkpointed.
        ProtocolError: the server broke the state machine.
    """
    _client_heads(cfg, dataset)
    head_classes = {h: dataset.labels[h].shape[1] for h in cfg.heads}
    if resume is not None:
        model = load_checkpoint(resume)
        if model.input_dim != dataset.X.shape[1]:
            raise nc.DimensionError(f"checkpoint expects {model.input_dim} input columns")
        log.info("resumed client from %s", resume)
    else:
        model = build_session_model(cfg, dataset.X.shape[1], dataset.image_shape, head_classes)

    out = TrainingLog(role="client", capture=transport.capture, model=model)
    if cfg.burnin_mode != "off" and cfg.burnin_iters > 0 and resume is None:
        out.burnin = client_burnin(model, cfg, dataset)

    try:
        _client_session(cfg, dataset, model, transport, out)
    except (ConnectionError, TimeoutError, OSError) as e:
        path = save_checkpoint(model, _checkpoint_path(cfg))
        log_event("session_aborted", role="client", reason=str(e), checkpoint=path)
        raise SessionAbortedError(f"connection lost: {e}", path) from e
    except (ProtocolError, WireError) as e:
        log.error("client protocol failure: %s", e)
        _try_send_error(transport, e.code)
        raise
    except Exception:
        _try_send_error(transport, ErrorCode.INTERNAL)
        raise
    return out


def _client_session(cfg, dataset, model: SplitModel, transport: Transport, out: TrainingLog):
    dtype = DType.parse(cfg.wire_dtype)
    rng = nc.Rng(cfg.seed)
    batch_rng, noise_rng = rng.substream("batches"), rng.substream("noise")
    transport.send(hello_message(cfg, dataset))
    reply = transport.recv()
    _expect(reply, MsgType.HELLO)
    if len(reply.tensors) != 1 or reply.tensors[0].shape != (1, 1):
        raise ProtocolError(f"HELLO reply carries {[t.shape for t in reply.tensors]}, "
                            "expected one 1x1 tensor")
    if int(reply.tensors[0][0, 0]) != model.split_dim:
        raise ProtocolError(f"server split width {reply.tensors[0][0, 0]} != {model.split_dim}")

    opt = AdamState(model.client_parameters(), lr=cfg.lr, decay=cfg.lr_decay)
    X_all = dataset.X
    n_eval = min(EVAL_SAMPLES, X_all.shape[0])
    protected = dataset.labels[cfg.protect] if cfg.protect else None
    batch_id = 0
    for epoch in range(cfg.epochs):
        batch_dcor = []
        for idx in iter_batches(batch_rng.permutation(X_all.shape[0]), cfg.batch_size):
            batch_id += 1
            X = X_all[idx]
            Z = forward_client(model, X)
            sent = Z.value
            if cfg.noise_scale > 0:
                sent = add_noise_baseline(sent, cfg.noise_scale, noise_rng)
            labels = [dataset.labels[head][idx] for head in cfg.heads]
            transport.send(WireMessage.make(MsgType.ACTIVATION, batch_id, [sent, *labels], dtype))

            reply = transport.recv()
            _expect(reply, MsgType.GRADIENT, batch_id)
            G = reply.tensors[0].astype(np.float64) if reply.tensors else None
            if G is None or G.shape != Z.shape:
                raise ProtocolError(
                    f"gradient shape {None if G is None else G.shape} != {Z.shape}",
                    ErrorCode.SHAPE_MISMATCH,
                )
            surrogate = nc.sum(Z * G)
            if cfg.alpha1 > 0:
                leak = batch_leakage(protected[idx] if protected is not None else X, Z)
                if leak is not None:
                    batch_dcor.append(leak.item())
                    surrogate = surrogate + leak * cfg.alpha1
            nc.backward(surrogate)
            adam_step(opt)
        out.batch_dcor.extend(batch_dcor)

        transport.send(WireMessage.make(MsgType.EPOCH_END, epoch, dtype=dtype))
        metrics = transport.recv()
        _expect(metrics, MsgType.METRICS, epoch)
        out.metrics_frames.append(metrics)
        opt.end_epoch()

        row = metrics.tensors[0].astype(np.float64)[0]
        X_eval = X_all[:n_eval]
        Z_eval = forward_client(model, X_eval).value
        task_loss = float(row[1])
        if batch_dcor:
            task_loss += cfg.alpha1 * float(np.mean(batch_dcor))
        em = EpochMetrics(
            epoch=epoch,
            train_loss=task_loss,
            accuracy={head: float(a) for head, a in zip(cfg.heads, row[2:])},
            dcor_xz=safe_dcor(X_eval, Z_eval),
            dcor_yz=safe_dcor(dataset.labels[cfg.heads[0]][:n_eval], Z_eval),
            dcor_sz=safe_dcor(protected[:n_eval], Z_eval) if protected is not None else None,
        )
        out.epochs.append(em)
        log.info("epoch %d: loss=%.4f dcor(X,Z)=%.4f", epoch, em.train_loss, em.dcor_xz)

    transport.send(WireMessage.make(MsgType.SHUTDOWN, batch_id, dtype=dtype))


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


def run_server(
    cfg: SessionConfig,
    transport: Transport,
    *,
    status: SessionStatus | None = None,
) -> TrainingLog:
    """
    Serve one session: forward/backward the upper layers for every ACTIVATION.

    Raises:
        ProtocolError: out-of-order batch ids, unexpected frames, bad shapes.
    """
    status = status or SessionStatus()
    status.update(state="running")
    out = TrainingLog(role="server", capture=transport.capture)
    try:
        _server_session(cfg, transport, out, status)
    except (ProtocolError, WireError) as e:
        status.update(state="error", error=str(e))
        _try_send_error(transport, e.code)
        log.error("server rejected session: %s", e)
        raise
    except Exception as e:
        status.update(state="error", error=str(e))
        raise
    status.update(state="done")
    return out


def _server_hello(cfg: SessionConfig, transport: Transport) -> SplitModel:
    hello = transport.recv()
    _expect(hello, MsgType.HELLO)
    if len(hello.tensors) != 3:
        raise ProtocolError(f"HELLO carries {len(hello.tensors)} tensors, expected 3")
    shapes = [t.shape for t in hello.tensors]
    if shapes[0] != (1, 4) or shapes[1][0] != 1 or shapes[2] != (1, 3):
        raise ProtocolError(f"malformed HELLO tensors {shapes}")
    dims, classes, ident = (t.astype(np.float64)[0] for t in hello.tensors)
    if len(classes) != len(cfg.heads):
        raise ProtocolError(f"client declares {len(classes)} heads, config has {len(cfg.heads)}")
    if tuple(int(v) for v in ident) != (*seed_words(cfg.seed), cfg.split_index):
        raise ProtocolError("client seed/split_index differ from server config")
    input_dim, h, w, c = (int(v) for v in dims)
    image_shape = (h, w, c) if h else None
    head_classes = {head: int(k) for head, k in zip(cfg.heads, classes)}
    model = build_session_model(cfg, input_dim, image_shape, head_classes)
    transport.send(WireMessage.make(MsgType.HELLO, 0, [np.array([[model.split_dim]])]))
    return model


def _server_session(cfg, transport: Transport, out: TrainingLog, status: SessionStatus):
    dtype = DType.parse(cfg.wire_dtype)
    model = _server_hello(cfg, transport)
    out.model = model
    opt = AdamState(model.server_parameters(), lr=cfg.lr, decay=cfg.lr_decay)
    heads = list(model.heads)
    expected = 1
    losses: list[float] = []
    correct = dict.fromkeys(heads, 0.0)
    seen = 0

    while True:
        msg = transport.recv()
        if msg.msg_type is MsgType.ACTIVATION:
            if msg.batch_id != expected:
                raise ProtocolError(f"batch {msg.batch_id} out of order (expected {expected})")
            if len(msg.tensors) != 1 + len(heads):
                raise ProtocolError(f"ACTIVATION carries {len(msg.tensors)} tensors",
                                    ErrorCode.SHAPE_MISMATCH)
            Z = nc.parameter(msg.tensors[0].astype(np.float64), "Z")
            ys = {head: t.astype(np.float64) for head, t in zip(heads, msg.tensors[1:])}
            if Z.shape[1] != model.split_dim or any(y.shape[0] != Z.shape[0] for y in ys.values()):
                raise ProtocolError("activation/label shapes do not match the model",
                                    ErrorCode.SHAPE_MISMATCH)
            logits = forward_server(model, Z)
            loss = multi_head_cce(logits, ys) * cfg.alpha2
            nc.backward(loss)
            transport.send(WireMessage.make(MsgType.GRADIENT, msg.batch_id, [Z.grad], dtype))
            adam_step(opt)

            losses.append(loss.item())
            out.batch_losses.append(loss.item())
            rows = Z.shape[0]
            for head in heads:
                correct[head] += accuracy(logits[head], ys[head]) * rows
            seen += rows
            expected += 1
            status.update(batches_seen=status.batches_seen + 1)

        elif msg.msg_type is MsgType.EPOCH_END:
            epoch = msg.batch_id
            mean_loss = float(np.mean(losses)) if losses else 0.0
            acc = {head: correct[head] / seen if seen else 0.0 for head in heads}
            row = np.array([[epoch, mean_loss, *(acc[h] for h in heads)]])
            metrics = WireMessage.make(MsgType.METRICS, epoch, [row], dtype)
            transport.send(metrics)
            out.metrics_frames.append(metrics)
            out.epochs.append(EpochMetrics(epoch=epoch, train_loss=mean_loss, accuracy=acc))
            status.add_epoch({"epoch": epoch, "train_loss": mean_loss, "accuracy": acc})
            opt.end_epoch()
            losses, correct, seen = [], dict.fromkeys(heads, 0.0), 0

        elif msg.msg_type is MsgType.SHUTDOWN:
            log_event("session_done", role="server", batches=expected - 1,
                      epochs=len(out.epochs))
            return

        else:
            raise ProtocolError(f"unexpected {msg.msg_type.name} frame")


# ---------------------------------------------------------------------------
# In-process session
# ---------------------------------------------------------------------------


def run_loopback(
    cfg: SessionConfig,
    dataset,
    *,
    status: SessionStatus | None = None,
    timeout: float = 600.0,
) -> tuple[TrainingLog, TrainingLog]:
    """Client and server in two threads over a LoopbackTransport; returns (client, server) logs."""
    client_end, server_end = LoopbackTransport.pair()
    result: dict[str, object] = {}

    def serve():
        try:
            result["server"] = run_server(cfg, server_end, status=status)
        except BaseException as e:  # noqa: BLE001
            result["server_error"] = e
        finally:
            server_end.close()

    thread = threading.Thread(target=serve, name="nopeek-server", daemon=True)
    started = time.monotonic()
    thread.start()
    try:
        client_log = run_client(cfg, dataset, client_end)
    finally:
        client_end.close()
        thread.join(timeout=max(0.0, timeout - (time.monotonic() - started)))
    if "server_error" in result:
        raise result["server_error"]
    if "server" not in result:
        raise TimeoutError(f"server thread still running after {timeout:g}s")
    return client_log, result["server"]
