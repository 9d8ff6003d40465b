"""NoPeek server process: split-learning socket server plus an optional read-only status API."""

from __future__ import annotations

import logging
import threading
import time

import uvicorn
from fastapi import FastAPI
from pydantic import BaseModel

from tools.audit import log_event
from tools.config import SessionConfig, Settings
from tools.splitnet import SessionStatus, TrainingLog, run_server
from tools.transport import SocketTransport, listen

log = logging.getLogger("nopeek.server")

# ---------------------------------------------------------------------------
# Status app
# ---------------------------------------------------------------------------

STATUS = SessionStatus()
STARTED = time.monotonic()

app = FastAPI(
    title="NoPeek server",
    description="Read-only status of the split-learning session",
    version="0.1.0",
)


class HealthResponse(BaseModel):
    status: str
    state: str
    batches_seen: int
    uptime_s: float
    error: str | None = None


class EpochRow(BaseModel):
    epoch: int
    train_loss: float
    accuracy: dict[str, float]


class MetricsResponse(BaseModel):
    epochs: list[EpochRow]
    count: int


@app.get("/api/health", response_model=HealthResponse)
async def health():
    snap = STATUS.snapshot()
    return HealthResponse(
        status="ok" if snap["state"] != "error" else "degraded",
        state=snap["state"],
        batches_seen=snap["batches_seen"],
        uptime_s=round(time.monotonic() - STARTED, 3),
        error=snap["error"],
    )


@app.get("/api/metrics", response_model=MetricsResponse)
async def metrics():
    rows = [EpochRow(**row) for row in STATUS.snapshot()["epochs"]]
    return MetricsResponse(epochs=rows, count=len(rows))


def start_status_app(host: str, port: int) -> threading.Thread:
    """Serve the status app from a daemon thread."""
    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, name="nopeek-status", daemon=True)
    thread.start()
    log.info("status app on http://%s:%d/api/health", host, port)
    return thread


# ---------------------------------------------------------------------------
# Socket server
# ---------------------------------------------------------------------------


def serve(cfg: SessionConfig, *, port: int | None = None, settings: Settings | None = None,
          sessions: int = 1) -> list[TrainingLog]:
    """Accept `sessions` client connections in turn and run one session on each."""
    settings = settings or Settings()
    if settings.status_port:
        start_status_app(settings.status_host, settings.status_port)
    listener = listen(cfg.host, cfg.port if port is None else port)
    logs = []
    try:
        for _ in range(sessions):
            with SocketTransport.accept(listener) as transport:
                STATUS.update(state="idle", batches_seen=0, error=None, epochs=[])
                logs.append(run_server(cfg, transport, status=STATUS))
                log_event("session_closed", bytes_in=transport.capture.bytes_received,
                          bytes_out=transport.capture.bytes_sent)
    finally:
        listener.close()
    return logs
