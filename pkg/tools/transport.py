"""
Byte transports for NPK1 frames.

SocketTransport runs over a TCP stream (one session per connection).
LoopbackTransport moves the same encoded bytes through in-process queues, so
tests exercise the exact wire contract without a socket.

Both keep a traffic capture (direction, type, batch id, byte count) and
write every frame to the audit log.
"""

from __future__ import annotations

import logging
import queue
import socket
from dataclasses import dataclass, field

from tools.audit import log_frame
from tools.wire import HEADER_SIZE, ErrorCode, WireError, WireMessage, decode, encode, parse_header

log = logging.getLogger("nopeek.transport")

MAX_PAYLOAD = 1 << 30
RECV_TIMEOUT = 120.0


@dataclass(frozen=True)
class FrameRecord:
    direction: str
    msg_type: str
    batch_id: int
    nbytes: int


@dataclass
class TrafficCapture:
    frames: list[FrameRecord] = field(default_factory=list)

    @property
    def bytes_sent(self) -> int:
        return sum(f.nbytes for f in self.frames if f.direction == "send")

    @property
    def bytes_received(self) -> int:
        return sum(f.nbytes for f in self.frames if f.direction == "recv")

    def types(self, direction: str | None = None) -> list[str]:
        return [f.msg_type for f in self.frames if direction in (None, f.direction)]


class Transport:
    """send/recv of whole messages; subclasses move the bytes."""

    def __init__(self):
        self.capture = TrafficCapture()

    def _send_bytes(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send(self, msg: WireMessage) -> None:
        frame = encode(msg)
        self._send_bytes(frame)
        self.capture.frames.append(FrameRecord("send", msg.msg_type.name, msg.batch_id, len(frame)))
        log_frame("send", msg, len(frame))

    def recv(self) -> WireMessage:
        frame = self._recv_frame()
        msg = decode(frame)
        self.capture.frames.append(FrameRecord("recv", msg.msg_type.name, msg.batch_id, len(frame)))
        log_frame("recv", msg, len(frame))
        return msg

    def __enter__(self) -> Transport:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# TCP
# ---------------------------------------------------------------------------


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = RECV_TIMEOUT) -> SocketTransport:
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        log.info("connected to %s:%d", host, port)
        return cls(sock)

    @classmethod
    def accept(cls, listener: socket.socket, timeout: float = RECV_TIMEOUT) -> SocketTransport:
        sock, addr = listener.accept()
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        log.info("accepted session from %s:%d", *addr[:2])
        return cls(sock)

    def _send_bytes(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError(f"peer closed after {len(buf)} of {n} bytes")
            buf += chunk
        return bytes(buf)

    def _recv_frame(self) -> bytes:
        header = self._read_exact(HEADER_SIZE)
        _, _, payload_len = parse_header(header)
        if payload_len > MAX_PAYLOAD:
            raise WireError(f"payload_len {payload_len} too large", ErrorCode.MALFORMED_FRAME)
        return header + self._read_exact(payload_len)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def listen(host: str, port: int) -> socket.socket:
    """Bound, listening socket; port 0 picks a free port (see getsockname)."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    log.info("listening on %s:%d", *listener.getsockname()[:2])
    return listener


# ---------------------------------------------------------------------------
# In-process
# ---------------------------------------------------------------------------

_CLOSED = b""


class LoopbackTransport(Transport):
    def __init__(self, outbox: queue.Queue, inbox: queue.Queue, timeout: float = RECV_TIMEOUT):
        super().__init__()
        self._outbox = outbox
        self._inbox = inbox
        self._timeout = timeout
        self._closed = False

    @classmethod
    def pair(cls, timeout: float = RECV_TIMEOUT) -> tuple[LoopbackTransport, LoopbackTransport]:
        """(client end, server end)."""
        a_to_b: queue.Queue = queue.Queue()
        b_to_a: queue.Queue = queue.Queue()
        return cls(a_to_b, b_to_a, timeout), cls(b_to_a, a_to_b, timeout)

    def _send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise ConnectionError("transport closed")
        self._outbox.put(frame)

    def _recv_frame(self) -> bytes:
        try:
            frame = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise ConnectionError(f"no frame within {self._timeout}s") from None
        if frame == _CLOSED:
            raise ConnectionError("peer closed")
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)
