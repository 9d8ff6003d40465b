"""
NPK1 frame codec.

Frame layout (all little-endian):

    magic "NPK1" | msg_type u8 | batch_id u64 | payload_len u32 | payload

The payload is a concatenation of tensors, each

    dtype u8 | ndim u8 | dims u32 * ndim | row-major data

dtype 0 is float32 (the default on the wire); dtype 1 is float64, used by
the loopback transport when a run must be bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from tools.config import WIRE_MAGIC

HEADER = struct.Struct("<4sBQI")
HEADER_SIZE = HEADER.size  # 17
_TENSOR_HEAD = struct.Struct("<BB")
_DIM = struct.Struct("<I")

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


class MsgType(IntEnum):
    HELLO = 0
    ACTIVATION = 1
    GRADIENT = 2
    METRICS = 3
    EPOCH_END = 4
    SHUTDOWN = 5
    ERROR = 6


class DType(IntEnum):
    F32 = 0
    F64 = 1

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f8")

    @classmethod
    def parse(cls, name: str) -> DType:
        return {"f32": cls.F32, "f64": cls.F64}[name]


class ErrorCode(IntEnum):
    """Codes carried in ERROR frames and on WireError/ProtocolError."""

    MALFORMED_FRAME = 1
    UNKNOWN_TYPE = 2
    LENGTH_MISMATCH = 3
    UNKNOWN_DTYPE = 4
    PROTOCOL = 5
    SHAPE_MISMATCH = 6
    INTERNAL = 7


class WireError(ValueError):
    """Raised when a frame cannot be encoded or decoded."""

    def __init__(self, message: str, code: ErrorCode):
        super().__init__(message)
        self.code = code


def _dtype_of(arr: np.ndarray) -> DType:
    if arr.dtype == np.float32:
        return DType.F32
    if arr.dtype == np.float64:
        return DType.F64
    raise WireError(f"no wire dtype for {arr.dtype}", ErrorCode.UNKNOWN_DTYPE)


@dataclass(frozen=True, eq=False)
class WireMessage:
    msg_type: MsgType
    batch_id: int = 0
    tensors: tuple[np.ndarray, ...] = ()

    @classmethod
    def make(cls, msg_type: MsgType, batch_id: int = 0, tensors=(),
             dtype: DType = DType.F32) -> WireMessage:
        """Build a message, casting every tensor to `dtype` (little-endian)."""
        cast = tuple(np.ascontiguousarray(t, dtype=dtype.numpy) for t in tensors)
        return cls(MsgType(msg_type), batch_id, cast)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WireMessage):
            return NotImplemented
        if (self.msg_type, self.batch_id, len(self.tensors)) != (
            other.msg_type, other.batch_id, len(other.tensors)
        ):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors, other.tensors)
        )

    __hash__ = None


def encode_tensor(arr: np.ndarray) -> bytes:
    code = _dtype_of(arr)
    if arr.ndim > 255:
        raise WireError(f"tensor has {arr.ndim} dims", ErrorCode.MALFORMED_FRAME)
    if any(d > _U32_MAX for d in arr.shape):
        raise WireError(f"tensor dim out of range: {arr.shape}", ErrorCode.MALFORMED_FRAME)
    parts = [_TENSOR_HEAD.pack(code, arr.ndim)]
    parts.extend(_DIM.pack(d) for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype=code.numpy).tobytes())
    return b"".join(parts)


def encode(m: WireMessage) -> bytes:
    if not 0 <= m.batch_id <= _U64_MAX:
        raise WireError(f"batch_id out of range: {m.batch_id}", ErrorCode.MALFORMED_FRAME)
    payload = b"".join(encode_tensor(t) for t in m.tensors)
    if len(payload) > _U32_MAX:
        raise WireError("payload exceeds 4 GiB", ErrorCode.MALFORMED_FRAME)
    return HEADER.pack(WIRE_MAGIC, int(m.msg_type), m.batch_id, len(payload)) + payload


def parse_header(header: bytes) -> tuple[MsgType, int, int]:
    """Validate a 17-byte header; returns (msg_type, batch_id, payload_len)."""
    if len(header) < HEADER_SIZE:
        raise WireError(f"truncated header ({len(header)} bytes)", ErrorCode.MALFORMED_FRAME)
    magic, raw_type, batch_id, payload_len = HEADER.unpack_from(header)
    if magic != WIRE_MAGIC:
        raise WireError(f"bad magic {magic!r}", ErrorCode.MALFORMED_FRAME)
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise WireError(f"unknown message type {raw_type}", ErrorCode.UNKNOWN_TYPE) from None
    return msg_type, batch_id, payload_len


def decode_tensors(payload: memoryview) -> tuple[np.ndarray, ...]:
    tensors = []
    pos, end = 0, len(payload)
    while pos < end:
        if pos + _TENSOR_HEAD.size > end:
            raise WireError("truncated tensor header", ErrorCode.MALFORMED_FRAME)
        raw_dtype, ndim = _TENSOR_HEAD.unpack_from(payload, pos)
        pos += _TENSOR_HEAD.size
        try:
            dtype = DType(raw_dtype)
        except ValueError:
            raise WireError(f"unknown dtype {raw_dtype}", ErrorCode.UNKNOWN_DTYPE) from None
        if pos + ndim * _DIM.size > end:
            raise WireError("truncated tensor dims", ErrorCode.MALFORMED_FRAME)
        shape = struct.unpack_from(f"<{ndim}I", payload, pos)
        pos += ndim * _DIM.size
        nbytes = math.prod(shape) * dtype.numpy.itemsize
        if pos + nbytes > end:
            raise WireError(f"tensor {shape} overruns payload", ErrorCode.MALFORMED_FRAME)
        if nbytes:
            data = np.frombuffer(payload[pos:pos + nbytes], dtype=dtype.numpy).reshape(shape)
            tensors.append(data.copy())
        else:
            tensors.append(np.zeros(shape, dtype=dtype.numpy))
        pos += nbytes
    return tuple(tensors)


def decode(frame: bytes) -> WireMessage:
    msg_type, batch_id, payload_len = parse_header(frame)
    actual = len(frame) - HEADER_SIZE
    if actual != payload_len:
        raise WireError(
            f"payload_len {payload_len} but {actual} payload bytes", ErrorCode.LENGTH_MISMATCH
        )
    tensors = decode_tensors(memoryview(frame)[HEADER_SIZE:])
    return WireMessage(msg_type, batch_id, tensors)


def error_message(code: ErrorCode, batch_id: int = 0) -> WireMessage:
    return WireMessage.make(MsgType.ERROR, batch_id, [np.array([[float(code)]])])
