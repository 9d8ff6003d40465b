"""Audit logging for wire traffic and data provenance.

Logs structured JSON per record: never tensor values, only shapes and
SHA-256 digests.
"""

from __future__ import annotations

import hashlib
import json
import logging
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from tools.wire import WireMessage

logger = logging.getLogger("nopeek.audit")


def digest(matrix: np.ndarray) -> str:
    """SHA-256 over shape and float64 little-endian bytes."""
    arr = np.ascontiguousarray(matrix, dtype="<f8")
    h = hashlib.sha256(repr(arr.shape).encode("ascii"))
    h.update(arr.tobytes())
    return h.hexdigest()


def log_frame(direction: str, msg: WireMessage, frame_len: int) -> None:
    """Log one frame crossing a transport (direction: "send" or "recv")."""
    if not logger.isEnabledFor(logging.DEBUG):
        return
    record = {
        "direction": direction,
        "msg_type": msg.msg_type.name,
        "batch_id": msg.batch_id,
        "frame_len": frame_len,
        "shapes": [list(t.shape) for t in msg.tensors],
        "payload_sha256": hashlib.sha256(b"".join(t.tobytes() for t in msg.tensors)).hexdigest(),
    }
    logger.debug(json.dumps(record))


def log_event(event: str, **fields) -> None:
    """Log a session-level event (burn-in done, checkpoint written, ...)."""
    record = {"event": event, **fields}
    logger.info(json.dumps(record, default=str))
