"""Envelope framing and MAC admission.

Wire frame (bit-exact): 4-byte big-endian body length, then the body:
1-byte version 0x01, 1-byte kind (0x01 DEMAND, 0x02 RESULT, 0x03 CONTROL),
32-byte signature, 32-byte MAC, payload. The MAC is HMAC-SHA256 over
(version, kind, signature, payload) under the instance's shared key.

Broker session control (subscribe/ack/heartbeat/deliveries) travels as
CONTROL frames whose payload is a sequence of tag-length-value fields. The
broker never holds the instance key: it parses control payloads but forwards
DEMAND/RESULT frames as opaque bytes, so their MACs are only ever checked by
the receiving agent. Control frames carry an all-zero MAC and are never
delivered to tiers.
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from enum import Enum

FRAME_VERSION = 0x01
HEADER_LEN = 1 + 1 + 32 + 32  # version, kind, signature, mac
DEFAULT_MAX_FRAME = 1 << 20  # max payload bytes
ZERO_MAC = b"\x00" * 32


class EnvelopeKind(Enum):
    DEMAND = 0x01
    RESULT = 0x02
    CONTROL = 0x03


class TransportError(Exception):
    """Base class for transport-layer errors."""


class FrameTooLarge(TransportError):
    def __init__(self, size: int, limit: int):
        super().__init__(f"payload of {size} bytes exceeds frame limit {limit}")
        self.size = size
        self.limit = limit


class MacMismatch(TransportError):
    def __init__(self, reason: str = "MAC verification failed"):
        super().__init__(reason)
        self.reason = reason


class MalformedFrame(TransportError):
    """Frame bytes that do not parse at all (bad version/kind/length)."""


@dataclass(frozen=True)
class TransportEnvelope:
    kind: EnvelopeKind
    signature: bytes  # 32 bytes; correlation id for CONTROL/RESULT matching
    payload: bytes

    def __post_init__(self):
        if len(self.signature) != 32:
            raise MalformedFrame(f"signature must be 32 bytes, got {len(self.signature)}")


def compute_mac(key: bytes, kind: EnvelopeKind, signature: bytes, payload: bytes) -> bytes:
    material = bytes([FRAME_VERSION, kind.value]) + signature + payload
    return hmac.new(key, material, hashlib.sha256).digest()


def encode_frame(
    envelope: TransportEnvelope,
    key: bytes | None,
    max_frame: int = DEFAULT_MAX_FRAME,
) -> bytes:
    """Serialize to the frame body (without the socket length prefix).

    `key=None` emits the all-zero MAC used by broker session control.
    """
    if len(envelope.payload) > max_frame:
        raise FrameTooLarge(len(envelope.payload), max_frame)
    mac = (
        ZERO_MAC
        if key is None
        else compute_mac(key, envelope.kind, envelope.signature, envelope.payload)
    )
    return (
        bytes([FRAME_VERSION, envelope.kind.value])
        + envelope.signature
        + mac
        + envelope.payload
    )


def frame_with_length(body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + body


_BYTE_KIND = {k.value: k for k in EnvelopeKind}


def decode_frame(body: bytes, key: bytes | None = None) -> TransportEnvelope:
    """Parse a frame body; verify the MAC when a key is supplied.

    Raises MalformedFrame for structurally bad bytes and MacMismatch when the
    keyed hash disagrees, which is the self-protection admission check.
    """
    if len(body) < HEADER_LEN:
        raise MalformedFrame(f"frame body too short: {len(body)} bytes")
    if body[0] != FRAME_VERSION:
        raise MalformedFrame(f"unknown frame version {body[0]:#04x}")
    kind = _BYTE_KIND.get(body[1])
    if kind is None:
        raise MalformedFrame(f"unknown frame kind {body[1]:#04x}")
    signature = body[2:34]
    mac = body[34:66]
    payload = body[66:]
    if key is not None:
        expected = compute_mac(key, kind, signature, payload)
        if not hmac.compare_digest(mac, expected):
            raise MacMismatch()
    return TransportEnvelope(kind=kind, signature=signature, payload=payload)


# -- tag-length-value control payloads --------------------------------------

T_OP = 0x01
T_QUEUE = 0x02
T_CONSUMER = 0x03
T_MODE = 0x04
T_DELIVERY = 0x05
T_FRAME = 0x06
T_ERROR = 0x07
T_DETAIL = 0x08

_TEXT_TAGS = {T_OP, T_QUEUE, T_CONSUMER, T_MODE, T_ERROR, T_DETAIL}


def encode_tlv(fields: dict[int, object]) -> bytes:
    out = bytearray()
    for tag, value in fields.items():
        if isinstance(value, str):
            raw = value.encode("utf-8")
        elif isinstance(value, int):
            raw = struct.pack(">Q", value)
        else:
            raw = bytes(value)
        out += struct.pack(">BI", tag, len(raw)) + raw
    return bytes(out)


def decode_tlv(payload: bytes) -> dict[int, object]:
    fields: dict[int, object] = {}
    pos = 0
    while pos < len(payload):
        if pos + 5 > len(payload):
            raise MalformedFrame("truncated TLV header")
        tag, length = struct.unpack(">BI", payload[pos : pos + 5])
        pos += 5
        if pos + length > len(payload):
            raise MalformedFrame("truncated TLV value")
        raw = payload[pos : pos + length]
        pos += length
        if tag in _TEXT_TAGS:
            fields[tag] = raw.decode("utf-8")
        elif tag == T_DELIVERY:
            fields[tag] = struct.unpack(">Q", raw)[0]
        else:
            fields[tag] = raw
    return fields


def control_envelope(fields: dict[int, object], corr: bytes = ZERO_MAC) -> TransportEnvelope:
    return TransportEnvelope(EnvelopeKind.CONTROL, corr, encode_tlv(fields))


# -- request/reply payload wrapper -------------------------------------------

_RPC_PLAIN = 0x00
_RPC_WRAPPED = 0x01


def wrap_rpc(reply_queue: str, payload: bytes) -> bytes:
    q = reply_queue.encode("utf-8")
    return bytes([_RPC_WRAPPED]) + struct.pack(">H", len(q)) + q + payload


def unwrap_rpc(payload: bytes) -> tuple[str | None, bytes]:
    """Split a request payload produced by `wrap_rpc` into (reply queue, inner).

    Only meant for queues served request/reply style; callers on such queues
    always wrap. A payload without the wrapper marker comes back untouched
    with no reply queue, so a responder can still drain stray traffic.
    """
    if not payload or payload[0] != _RPC_WRAPPED:
        return None, payload
    (qlen,) = struct.unpack(">H", payload[1:3])
    queue = payload[3 : 3 + qlen].decode("utf-8")
    return queue, payload[3 + qlen :]
