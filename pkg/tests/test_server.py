"""Tests for the status API and the socket server loop."""

import threading

import pytest
from fastapi.testclient import TestClient

from server import main as server_main
from tools.config import SessionConfig, Settings
from tools.datasets import gen_synthetic
from tools.splitnet import SessionStatus, run_client
from tools.transport import SocketTransport


@pytest.fixture
def status(monkeypatch):
    fresh = SessionStatus()
    monkeypatch.setattr(server_main, "STATUS", fresh)
    return fresh


@pytest.fixture
def client(status):
    return TestClient(server_main.app)


def test_health_when_idle(client):
    resp = client.get("/api/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert body["state"] == "idle"
    assert body["batches_seen"] == 0


def test_health_degraded_on_error(client, status):
    status.update(state="error", error="batch 3 out of order")
    body = client.get("/api/health").json()
    assert body["status"] == "degraded"
    assert body["error"] == "batch 3 out of order"


def test_metrics_rows(client, status):
    status.add_epoch({"epoch": 0, "train_loss": 1.25, "accuracy": {"class": 0.5}})
    body = client.get("/api/metrics").json()
    assert body["count"] == 1
    assert body["epochs"][0] == {"epoch": 0, "train_loss": 1.25, "accuracy": {"class": 0.5}}


def test_serve_runs_one_tcp_session(status, monkeypatch):
    cfg = SessionConfig(epochs=1, batch_size=16, hidden=(16, 8, 8), lr=1e-2, port=0)
    listeners = []
    real_listen = server_main.listen

    def capture_listen(host, port):
        sock = real_listen(host, port)
        listeners.append(sock)
        return sock

    monkeypatch.setattr(server_main, "listen", capture_listen)
    result = {}
    thread = threading.Thread(
        target=lambda: result.setdefault("logs", server_main.serve(cfg, settings=Settings(
            status_port=0))),
    )
    thread.start()
    while not listeners:
        thread.join(0.01)
    port = listeners[0].getsockname()[1]

    ds = gen_synthetic("blobs", 32, 0).standardized()
    with SocketTransport.connect("127.0.0.1", port, timeout=30.0) as transport:
        client_log = run_client(cfg, ds, transport)
    thread.join(30.0)

    assert len(result["logs"]) == 1
    assert len(client_log.epochs) == 1
    assert status.snapshot()["state"] == "done"
    assert status.snapshot()["batches_seen"] == 2
