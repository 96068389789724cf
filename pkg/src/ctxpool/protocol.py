"""Length-prefixed JSON framing and the closed message vocabulary.

A frame is a 4-byte big-endian unsigned length followed by that many bytes
of UTF-8 JSON.  The JSON body is an object whose ``"type"`` names one of
:data:`MESSAGE_FIELDS`.  Messages are plain dicts.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

MAX_FRAME = 16 * 1024 * 1024
_HEADER = struct.Struct("!I")

# type -> required fields.  Optional fields are listed in docs/protocol.md.
MESSAGE_FIELDS: dict[str, tuple[str, ...]] = {
    "REGISTER": ("worker_id", "gpu_model", "resources", "cache_inventory"),
    "INSTALL_CONTEXT": ("recipe", "source"),
    "CONTEXT_READY": ("context_id", "build_seconds"),
    "INVOKE": ("task_id", "attempt", "awareness", "items"),
    "RESULT": ("task_id", "attempt", "item_results", "timings"),
    "TRANSFER_GET": ("context_id",),
    "TRANSFER_DATA": ("context_id", "declared_bytes"),
    "HEARTBEAT": ("worker_id", "emulated_clock"),
    "SHUTDOWN": (),
    "ERROR": ("code",),
    # shared-filesystem emulator endpoint
    "FS_FETCH": ("reader_id", "nbytes"),
    "FS_DONE": ("seconds",),
}

ERROR_CODES = frozenset({"CONTEXT_MISSING", "NOT_FOUND", "BUSY", "INSUFFICIENT_DISK", "UNKNOWN_TASK"})


class ProtocolError(Exception):
    pass


class UnknownTypeError(ProtocolError):
    pass


class OversizeFrameError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class MalformedFrameError(ProtocolError):
    pass


def validate(message: dict) -> dict:
    if not isinstance(message, dict):
        raise MalformedFrameError(f"message body must be an object, got {type(message).__name__}")
    kind = message.get("type")
    if kind not in MESSAGE_FIELDS:
        raise UnknownTypeError(f"unknown message type {kind!r}")
    missing = [f for f in MESSAGE_FIELDS[kind] if f not in message]
    if missing:
        raise MalformedFrameError(f"{kind} missing fields {missing}")
    if kind == "ERROR" and message["code"] not in ERROR_CODES:
        raise MalformedFrameError(f"unknown error code {message['code']!r}")
    return message


def message(kind: str, **fields) -> dict:
    return validate({"type": kind, **fields})


def encode(msg: dict) -> bytes:
    validate(msg)
    body = json.dumps(msg, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise OversizeFrameError(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(body)) + body


def _decode_body(body: bytes) -> dict:
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrameError(str(exc)) from exc
    return validate(msg)


def decode(data: bytes) -> dict:
    """Decode exactly one complete frame."""
    if len(data) < _HEADER.size:
        raise TruncatedFrameError("frame shorter than its length header")
    (length,) = _HEADER.unpack_from(data)
    if length > MAX_FRAME:
        raise OversizeFrameError(f"declared length {length} exceeds {MAX_FRAME}")
    if len(data) < _HEADER.size + length:
        raise TruncatedFrameError(f"expected {length} body bytes, got {len(data) - _HEADER.size}")
    if len(data) > _HEADER.size + length:
        raise MalformedFrameError("trailing bytes after frame")
    return _decode_body(data[_HEADER.size :])


class FrameDecoder:
    """Incremental decoder for one connection's byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf += data
        return list(self._drain())

    def _drain(self) -> Iterator[dict]:
        while len(self._buf) >= _HEADER.size:
            (length,) = _HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise OversizeFrameError(f"declared length {length} exceeds {MAX_FRAME}")
            end = _HEADER.size + length
            if len(self._buf) < end:
                return
            body = bytes(self._buf[_HEADER.size : end])
            del self._buf[:end]
            yield _decode_body(body)

    def close(self) -> None:
        """Signal end of stream; leftover bytes mean the last frame was cut."""
        if self._buf:
            raise TruncatedFrameError(f"{len(self._buf)} bytes of an incomplete frame at end of stream")

    @property
    def pending(self) -> int:
        return len(self._buf)
