"""Tests for the split-learning client/server session."""

import threading
from dataclasses import replace

import numpy as np
import pytest

from tools import numcore as nc
from tools import splitnet
from tools.config import SessionConfig
from tools.datasets import gen_synthetic
from tools.harness import train_unsplit
from tools.model import forward_client, load_checkpoint, save_checkpoint
from tools.nopeek_loss import AttributeConfigError
from tools.splitnet import (
    ProtocolError,
    SessionAbortedError,
    SessionStatus,
    TrainingLog,
    add_noise_baseline,
    hello_message,
    iter_batches,
    run_client,
    run_loopback,
    run_server,
)
from tools.transport import LoopbackTransport
from tools.wire import ErrorCode, MsgType, WireMessage


def _cfg(**overrides):
    values = {"epochs": 1, "batch_size": 16, "hidden": (16, 8, 8), "lr": 1e-2, "seed": 3}
    return SessionConfig(**{**values, **overrides})


def _blobs(n=48, seed=3):
    return gen_synthetic("blobs", n, seed).standardized()


def _with_server(cfg, ds, **client_kwargs):
    """run_client against run_server in a thread; returns (client log, server log)."""
    client_end, server_end = LoopbackTransport.pair(timeout=30.0)
    result = {}

    def serve():
        result["server"] = run_server(cfg, server_end)

    thread = threading.Thread(target=serve)
    thread.start()
    client_log = run_client(cfg, ds, client_end, **client_kwargs)
    thread.join(30.0)
    return client_log, result["server"]


class TestHelpers:
    def test_iter_batches_drops_single_row_tail(self):
        batches = list(iter_batches(np.arange(9), 4))
        assert [len(b) for b in batches] == [4, 4]
        assert [len(b) for b in iter_batches(np.arange(10), 4)] == [4, 4, 2]

    def test_noise_scale_zero_is_identity(self):
        Z = nc.Rng(0).normal(5, 3)
        assert np.array_equal(add_noise_baseline(Z, 0.0, nc.Rng(1)), Z)

    def test_noise_is_bounded_and_seeded(self):
        Z = np.zeros((50, 4))
        a = add_noise_baseline(Z, 0.5, nc.Rng(2))
        b = add_noise_baseline(Z, 0.5, nc.Rng(2))
        assert np.array_equal(a, b)
        assert np.abs(a).max() <= 0.5
        assert np.abs(a).max() > 0

    def test_negative_noise_scale(self):
        with pytest.raises(nc.ContractError):
            add_noise_baseline(np.zeros((2, 2)), -1.0, nc.Rng(0))


class TestSession:
    def test_frame_sequence(self):
        cfg = _cfg(batch_size=48)
        client_log, server_log = run_loopback(cfg, _blobs())
        assert client_log.capture.types("send") == ["HELLO", "ACTIVATION", "EPOCH_END",
                                                    "SHUTDOWN"]
        assert client_log.capture.types("recv") == ["HELLO", "GRADIENT", "METRICS"]
        assert server_log.capture.types("send") == ["HELLO", "GRADIENT", "METRICS"]
        assert len(client_log.epochs) == len(server_log.epochs) == 1

    def test_raw_inputs_never_cross_the_wire(self):
        cfg = _cfg(epochs=2, alpha1=0.5)
        ds = _blobs()
        client_end, server_end = LoopbackTransport.pair(timeout=30.0)
        sent = []
        original = client_end.send

        def record(msg):
            sent.append(msg)
            original(msg)

        client_end.send = record
        thread = threading.Thread(target=run_server, args=(cfg, server_end))
        thread.start()
        run_client(cfg, ds, client_end)
        thread.join(30.0)
        activations = [m.tensors[0].astype(np.float64) for m in sent
                       if m.msg_type is MsgType.ACTIVATION]
        assert len(activations) == 6
        for Z in activations:
            assert Z.shape[1] == ds.X.shape[1]  # same width, so only the values can differ
            gaps = np.abs(Z[:, None, :] - ds.X[None, :, :]).max(axis=2)
            assert gaps.min() > 1e-3
        payload = b"".join(t.astype("<f4").tobytes() for m in sent for t in m.tensors)
        for row in ds.X:
            assert row.astype("<f4").tobytes() not in payload

    def test_matches_unsplit_training_bit_exactly_on_f64_wire(self):
        cfg = _cfg(epochs=3, alpha1=0.0, wire_dtype="f64")
        ds = _blobs()
        _, server_log = run_loopback(cfg, ds)
        reference = train_unsplit(cfg, ds)
        assert server_log.batch_losses == reference.batch_losses
        assert len(server_log.batch_losses) == 9

    def test_f32_wire_stays_close_to_unsplit(self):
        cfg = _cfg(epochs=3, alpha1=0.0)
        ds = _blobs()
        _, server_log = run_loopback(cfg, ds)
        reference = train_unsplit(cfg, ds)
        diffs = np.abs(np.array(server_log.batch_losses) - np.array(reference.batch_losses))
        assert diffs.max() < 1e-4

    def test_alpha1_records_batch_dcor(self):
        cfg = _cfg(alpha1=0.5)
        client_log, _ = run_loopback(cfg, _blobs())
        assert len(client_log.batch_dcor) == 3
        assert all(0.0 <= d <= 1.0 + 1e-9 for d in client_log.batch_dcor)
        assert 0.0 <= client_log.epochs[0].dcor_xz <= 1.0 + 1e-9

    def test_multi_head_metrics(self):
        cfg = _cfg(heads=("class", "quadrant"))
        client_log, _ = run_loopback(cfg, _blobs())
        assert set(client_log.epochs[0].accuracy) == {"class", "quadrant"}
        row = client_log.metrics_frames[0].tensors[0]
        assert row.shape == (1, 4)

    def test_protected_attribute_is_reported(self):
        cfg = _cfg(alpha1=0.5, protect="parity")
        client_log, _ = run_loopback(cfg, _blobs())
        assert client_log.epochs[0].dcor_sz is not None

    def test_status_tracks_server(self):
        status = SessionStatus()
        run_loopback(_cfg(), _blobs(), status=status)
        snap = status.snapshot()
        assert snap["state"] == "done"
        assert snap["batches_seen"] == 3
        assert len(snap["epochs"]) == 1

    def test_burnin_runs_before_hello(self):
        cfg = _cfg(burnin_mode="ascent", burnin_iters=5, burnin_samples=32)
        client_log, _ = run_loopback(cfg, _blobs())
        assert client_log.burnin is not None
        assert client_log.burnin.state.iteration <= 5
        assert client_log.capture.types()[0] == "HELLO"

    def test_seed_beyond_f64_precision(self):
        _, server_log = run_loopback(_cfg(seed=2**53 + 1), _blobs())
        assert len(server_log.epochs) == 1

    def test_constant_protected_attribute_trains_without_dcor(self):
        ds = _blobs()
        constant = np.tile(ds.labels["quadrant"][:1], (ds.n, 1))
        ds = replace(ds, labels={**ds.labels, "quadrant": constant})
        client_log, server_log = run_loopback(_cfg(alpha1=0.5, protect="quadrant"), ds)
        assert client_log.batch_dcor == []
        assert client_log.epochs[0].dcor_sz == 0.0
        assert len(server_log.batch_losses) == 3

    def test_dcor_gradient_reaches_client_as_in_unsplit_training(self):
        cfg = _cfg(alpha1=0.5, wire_dtype="f64")
        ds = _blobs()
        client_log, server_log = run_loopback(cfg, ds)
        reference = train_unsplit(cfg, ds).model
        split_params = (client_log.model.client_parameters()
                        + server_log.model.server_parameters())
        for ours, ref in zip(split_params, reference.parameters()):
            assert np.allclose(ours.value, ref.value, rtol=0, atol=1e-8)
        plain = train_unsplit(_cfg(alpha1=0.0, wire_dtype="f64"), ds).model
        assert not np.allclose(split_params[0].value, plain.parameters()[0].value)


class TestErrors:
    def test_missing_attribute(self):
        client_end, _ = LoopbackTransport.pair(timeout=1.0)
        with pytest.raises(AttributeConfigError):
            run_client(_cfg(heads=("colour",)), _blobs(), client_end)
        assert client_end.capture.frames == []

    def test_binary_protected_attribute_can_be_skipped(self):
        client_end, _ = LoopbackTransport.pair(timeout=1.0)
        cfg = _cfg(protect="parity", skip_binary_protected=True)
        with pytest.raises(AttributeConfigError):
            run_client(cfg, _blobs(), client_end)

    def test_out_of_order_batch(self):
        cfg = _cfg()
        ds = _blobs()
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        client_end.send(hello_message(cfg, ds))
        client_end.send(WireMessage.make(MsgType.ACTIVATION, 2, [np.zeros((4, 8)),
                                                                 np.eye(4)]))
        status = SessionStatus()
        with pytest.raises(ProtocolError) as exc:
            run_server(cfg, server_end, status=status)
        assert exc.value.code is ErrorCode.PROTOCOL
        assert client_end.recv().msg_type is MsgType.HELLO
        err = client_end.recv()
        assert err.msg_type is MsgType.ERROR
        assert int(err.tensors[0][0, 0]) == 5
        assert status.snapshot()["state"] == "error"

    def test_activation_width_mismatch(self):
        cfg = _cfg()
        ds = _blobs()
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        client_end.send(hello_message(cfg, ds))
        client_end.send(WireMessage.make(MsgType.ACTIVATION, 1, [np.zeros((4, 3)), np.eye(4)]))
        with pytest.raises(ProtocolError) as exc:
            run_server(cfg, server_end)
        assert exc.value.code is ErrorCode.SHAPE_MISMATCH

    def test_hello_seed_mismatch(self):
        cfg = _cfg()
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        client_end.send(hello_message(_cfg(seed=99), _blobs()))
        with pytest.raises(ProtocolError):
            run_server(cfg, server_end)

    def test_frame_before_hello(self):
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        client_end.send(WireMessage.make(MsgType.EPOCH_END, 0))
        with pytest.raises(ProtocolError):
            run_server(_cfg(), server_end)

    def test_client_raises_on_peer_error_frame(self):
        cfg = _cfg()
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        server_end.send(WireMessage.make(MsgType.ERROR, 0,
                                         [np.array([[float(ErrorCode.UNKNOWN_DTYPE)]])]))
        with pytest.raises(ProtocolError) as exc:
            run_client(cfg, _blobs(), client_end)
        assert exc.value.code is ErrorCode.UNKNOWN_DTYPE

    def test_connection_loss_checkpoints_and_resumes(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NOPEEK_CHECKPOINT_DIR", str(tmp_path))
        cfg = _cfg()
        ds = _blobs()
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        server_end.close()
        with pytest.raises(SessionAbortedError) as exc:
            run_client(cfg, ds, client_end)
        path = exc.value.checkpoint_path
        assert path == tmp_path / "client-seed3.npkm"
        assert path.exists()

        # shift the saved weights so a fresh init is distinguishable from a resume
        saved = load_checkpoint(path)
        W = saved.client_parameters()[0]
        W.value = W.value + 1.0
        save_checkpoint(saved, path)
        slow = _cfg(lr=1e-12)
        client_log, server_log = _with_server(slow, ds, resume=path)
        assert len(server_log.epochs) == 1
        resumed = client_log.model.client_parameters()[0].value
        assert np.allclose(resumed, W.value, atol=1e-9)
        assert np.allclose(forward_client(client_log.model, ds.X[:4]).value,
                           forward_client(saved, ds.X[:4]).value, atol=1e-6)

    def test_resume_rejects_other_input_width(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NOPEEK_CHECKPOINT_DIR", str(tmp_path))
        cfg = _cfg()
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        server_end.close()
        with pytest.raises(SessionAbortedError) as exc:
            run_client(cfg, _blobs(), client_end)
        stripes = gen_synthetic("stripes-image", 16, 0)
        other, _ = LoopbackTransport.pair(timeout=1.0)
        with pytest.raises(nc.DimensionError):
            run_client(cfg, stripes, other, resume=exc.value.checkpoint_path)

    def test_hello_tells_adjacent_large_seeds_apart(self):
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        client_end.send(hello_message(_cfg(seed=2**53 + 1), _blobs()))
        with pytest.raises(ProtocolError):
            run_server(_cfg(seed=2**53), server_end)

    def test_empty_hello_reply(self):
        client_end, server_end = LoopbackTransport.pair(timeout=1.0)
        server_end.send(WireMessage.make(MsgType.HELLO, 0))
        with pytest.raises(ProtocolError) as exc:
            run_client(_cfg(), _blobs(), client_end)
        assert exc.value.code is ErrorCode.PROTOCOL

    def test_loopback_times_out_on_stuck_server(self, monkeypatch):
        gate = threading.Event()

        def stuck(cfg, transport, status=None):
            gate.wait(5.0)

        monkeypatch.setattr(splitnet, "run_server", stuck)
        monkeypatch.setattr(splitnet, "run_client", lambda *args: TrainingLog("client"))
        try:
            with pytest.raises(TimeoutError):
                run_loopback(_cfg(), _blobs(), timeout=0.05)
        finally:
            gate.set()
