"""Length-prefixed message frames exchanged by clients, the manager and workers.

Frame layout (normative, see PROTOCOL.md)::

    bytes 0-3   payload length N, unsigned big-endian (version byte excluded)
    byte  4     protocol version, 0x01
    bytes 5..   N bytes of UTF-8 JSON: one object, key "type" first, the
                remaining keys sorted, no whitespace

Decoding is strict: a payload that does not re-encode to the identical bytes
is rejected, so every accepted frame is canonical.
"""
from __future__ import annotations

import base64
import binascii
import json
import struct
from dataclasses import dataclass, field

PROTOCOL_VERSION = 0x01
HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 16 * 1024 * 1024


class ProtocolError(Exception):
    pass


class FrameError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class IncompleteFrame(ProtocolError):
    """More bytes are needed before a frame can be decoded."""


_INT = (int,)
_NUM = (int, float)

# field -> (accepted python types, required)
SCHEMAS: dict[str, dict[str, tuple[tuple, bool]]] = {
    "REGISTER": {"worker_id": ((str,), True), "mr": (_INT, True), "cru": ((float,), True), "at": ((float,), False)},
    "REGISTER_ACK": {"worker_id": ((str,), True), "heartbeat_period": ((float,), True)},
    "HEARTBEAT": {
        "worker_id": ((str,), True),
        "active": ((list,), True),
        "cru": ((float,), True),
        "at": ((float,), False),
    },
    "ASSIGN": {"circuit": ((str,), True), "shots": (_INT, False), "seed": (_INT, False)},
    "RESULT": {"circuit_id": ((str,), True), "fidelity": ((float,), True)},
    "SUBMIT": {
        "client_id": ((str,), True),
        "circuit": ((str,), True),
        "shots": (_INT, False),
        "seed": (_INT, False),
    },
    "SUBMIT_ACK": {"circuit_id": ((str,), True), "status": ((str,), True)},
    "JOB_RESULT": {"circuit_id": ((str,), True), "fidelity": ((float,), True), "cached": ((bool,), True)},
    "ERROR": {"code": ((str,), True), "detail": ((str,), True), "circuit_id": ((str,), False)},
}
MESSAGE_TYPES = frozenset(SCHEMAS)
_FLOAT_FIELDS = {"cru", "at", "heartbeat_period", "fidelity"}


@dataclass(frozen=True)
class Message:
    type: str
    correlation_id: int
    body: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "body", _validate(self.type, self.correlation_id, dict(self.body)))

    def __getitem__(self, key):
        return self.body[key]

    def get(self, key, default=None):
        return self.body.get(key, default)


def _validate(kind, correlation_id, body):
    if kind not in SCHEMAS:
        raise FrameError(f"unknown message type {kind!r}")
    if type(correlation_id) is not int or correlation_id < 0:
        raise FrameError("correlation_id must be a non-negative integer")
    schema = SCHEMAS[kind]
    for name, (types, required) in schema.items():
        if name not in body:
            if required:
                raise FrameError(f"{kind} missing field {name!r}")
            continue
        value = body[name]
        if name in _FLOAT_FIELDS and type(value) is int:
            value = body[name] = float(value)
        # bool is an int subclass; only accept it where bool is declared
        if type(value) not in types:
            raise FrameError(f"{kind}.{name} has type {type(value).__name__}")
    extra = set(body) - set(schema)
    if extra:
        raise FrameError(f"{kind} has unexpected fields {sorted(extra)}")
    if kind == "HEARTBEAT":
        active = []
        for item in body["active"]:
            if (
                not isinstance(item, (list, tuple))
                or len(item) != 2
                or type(item[0]) is not str
                or type(item[1]) is not int
            ):
                raise FrameError("HEARTBEAT.active entries must be [circuit_id, demand]")
            active.append([item[0], item[1]])
        body["active"] = active
    return body


def _payload(msg: Message) -> bytes:
    rest = dict(msg.body, correlation_id=msg.correlation_id)
    ordered = {"type": msg.type}
    for key in sorted(rest):
        ordered[key] = rest[key]
    try:
        text = json.dumps(ordered, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise FrameError(str(exc)) from None
    return text.encode("utf-8")


def encode(msg: Message) -> bytes:
    payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload), PROTOCOL_VERSION) + payload


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise FrameError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_constant(name):
    raise FrameError(f"non-finite number {name}")


def decode_payload(payload: bytes) -> Message:
    try:
        obj = json.loads(
            payload.decode("utf-8"),
            object_pairs_hook=_no_duplicates,
            parse_constant=_reject_constant,
        )
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        if isinstance(exc, FrameError):
            raise
        raise FrameError(f"payload is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or next(iter(obj), None) != "type":
        raise FrameError("payload must be an object whose first key is 'type'")
    kind = obj.pop("type")
    if not isinstance(kind, str):
        raise FrameError("type must be a string")
    correlation_id = obj.pop("correlation_id", None)
    msg = Message(kind, correlation_id, obj)
    if _payload(msg) != payload:
        raise FrameError("payload is not in canonical form")
    return msg


def decode_frame(buf, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at ``offset``; returns the message and bytes consumed.

    Raises :class:`IncompleteFrame` when ``buf`` ends before the frame does.
    Never reads beyond the declared frame length.
    """
    view = memoryview(buf)[offset:]
    if len(view) < HEADER.size:
        raise IncompleteFrame(f"need {HEADER.size} header bytes, have {len(view)}")
    length, version = HEADER.unpack_from(view, 0)
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    if version != PROTOCOL_VERSION:
        raise VersionError(f"unsupported protocol version {version:#04x}")
    end = HEADER.size + length
    if len(view) < end:
        raise IncompleteFrame(f"need {end} bytes, have {len(view)}")
    return decode_payload(bytes(view[HEADER.size : end])), end


def decode(data: bytes) -> Message:
    msg, used = decode_frame(data)
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return msg


class FrameDecoder:
    """Incremental decoder for one connection; tolerates arbitrary read splits."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            try:
                msg, used = decode_frame(self._buf)
            except IncompleteFrame:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


def pack_circuit(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unpack_circuit(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise FrameError(f"circuit field is not base64: {exc}") from None


async def read_message(reader, decoder: FrameDecoder, queue: list) -> Message | None:
    """Next message from an asyncio stream, or None at EOF."""
    while not queue:
        data = await reader.read(65536)
        if not data:
            return None
        queue.extend(decoder.feed(data))
    return queue.pop(0)
