"""Demand values: kinds, contexts, signatures, timelines, and the state machine.

Everything in this module is an immutable value that is safe to copy between
threads; mutation happens only inside the store. The canonical encoding below
is normative and shared by signature hashing, the wire, and store snapshots:

    u8   version (0x01)
    u8   kind (0x01 intensional, 0x02 procedural, 0x03 resource, 0x04 system)
    u32  program_id byte length, then program_id UTF-8 bytes
    u32  dimension count, then per dimension (sorted ascending by name):
             u32 name byte length, name UTF-8 bytes, i64 index
    u32  payload byte length, then payload bytes

All integers are big-endian; dimension indexes are signed 64-bit. The full
wire form (`demand_to_bytes`) appends state, access counter, and timeline to
the canonical prefix.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from enum import Enum

ENCODING_VERSION = 0x01


class DemandKind(Enum):
    INTENSIONAL = 0x01
    PROCEDURAL = 0x02
    RESOURCE = 0x03
    SYSTEM = 0x04


class DemandState(Enum):
    PENDING = "pending"
    PROCESSING = "processing"
    COMPUTED = "computed"


class DemandEvent(Enum):
    DISPATCH = "dispatch"
    RESULT_STORED = "result_stored"
    WORKER_LOST = "worker_lost"


class DemandError(Exception):
    """Base class for demand value errors."""


class DuplicateDimension(DemandError):
    def __init__(self, name: str):
        super().__init__(f"duplicate context dimension: {name!r}")
        self.name = name


class IllegalTransition(DemandError):
    def __init__(self, state: DemandState, event: DemandEvent):
        super().__init__(f"no transition from {state.value} on {event.value}")
        self.state = state
        self.event = event


class ClockRegression(DemandError):
    def __init__(self, now: int, last: int):
        super().__init__(f"timeline timestamp {now} precedes last entry {last}")
        self.now = now
        self.last = last


class MalformedDemand(DemandError):
    """Raised when demand bytes do not decode."""


@dataclass(frozen=True)
class Context:
    """An ordered set of (dimension name, integer index) pairs."""

    dims: tuple[tuple[str, int], ...] = ()

    @classmethod
    def of(cls, **dims: int) -> "Context":
        return cls(tuple(dims.items()))

    def get(self, name: str) -> int | None:
        for dim, index in self.dims:
            if dim == name:
                return index
        return None

    def with_dim(self, name: str, index: int) -> "Context":
        """Return a copy with `name` set to `index` (replacing any old value)."""
        kept = tuple((d, i) for d, i in self.dims if d != name)
        return Context(kept + ((name, index),))

    def as_dict(self) -> dict[str, int]:
        return dict(self.dims)


def canonicalize(context: Context) -> Context:
    """Sort dimensions ascending by name; reject duplicate names."""
    seen: set[str] = set()
    for name, _ in context.dims:
        if name in seen:
            raise DuplicateDimension(name)
        seen.add(name)
    return Context(tuple(sorted(context.dims, key=lambda kv: kv[0])))


@dataclass(frozen=True)
class DemandSignature:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise MalformedDemand(f"signature must be 32 bytes, got {len(self.digest)}")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: str) -> "DemandSignature":
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex


def _pack_bytes(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _pack_text(text: str) -> bytes:
    return _pack_bytes(text.encode("utf-8"))


def canonical_encode(
    kind: DemandKind, program_id: str, context: Context, payload: bytes
) -> bytes:
    """The length-prefixed canonical encoding hashed into the signature."""
    canon = canonicalize(context)
    out = bytearray()
    out += struct.pack(">BB", ENCODING_VERSION, kind.value)
    out += _pack_text(program_id)
    out += struct.pack(">I", len(canon.dims))
    for name, index in canon.dims:
        out += _pack_text(name)
        out += struct.pack(">q", index)
    out += _pack_bytes(payload)
    return bytes(out)


def compute_signature(
    kind: DemandKind, program_id: str, context: Context, payload: bytes
) -> DemandSignature:
    return DemandSignature(
        hashlib.sha256(canonical_encode(kind, program_id, context, payload)).digest()
    )


_TRANSITIONS = {
    (DemandState.PENDING, DemandEvent.DISPATCH): DemandState.PROCESSING,
    (DemandState.PROCESSING, DemandEvent.RESULT_STORED): DemandState.COMPUTED,
    (DemandState.PROCESSING, DemandEvent.WORKER_LOST): DemandState.PENDING,
}


def transition(state: DemandState, event: DemandEvent) -> DemandState:
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(state, event) from None


@dataclass(frozen=True)
class Demand:
    kind: DemandKind
    program_id: str
    context: Context
    payload: bytes
    signature: DemandSignature
    timeline: tuple[tuple[str, int], ...] = ()
    access_number: int = 0
    state: DemandState = DemandState.PENDING


def make_demand(
    kind: DemandKind,
    program_id: str,
    context: Context,
    payload: bytes = b"",
    origin_tier: str | None = None,
    now: int | None = None,
) -> Demand:
    """Build a Pending demand with its signature computed.

    `origin_tier` stamps the creating tier into the timeline so provenance
    starts at birth.
    """
    canon = canonicalize(context)
    d = Demand(
        kind=kind,
        program_id=program_id,
        context=canon,
        payload=payload,
        signature=compute_signature(kind, program_id, canon, payload),
    )
    if origin_tier is not None:
        d = append_timeline(d, origin_tier, 0 if now is None else now)
    return d


def append_timeline(demand: Demand, tier_id: str, now: int) -> Demand:
    if demand.timeline and now < demand.timeline[-1][1]:
        raise ClockRegression(now, demand.timeline[-1][1])
    return replace(demand, timeline=demand.timeline + ((tier_id, now),))


_STATE_BYTE = {DemandState.PENDING: 1, DemandState.PROCESSING: 2, DemandState.COMPUTED: 3}
_BYTE_STATE = {v: k for k, v in _STATE_BYTE.items()}
_BYTE_KIND = {k.value: k for k in DemandKind}


def demand_to_bytes(demand: Demand) -> bytes:
    """Full wire form: canonical prefix + state + access counter + timeline."""
    out = bytearray(
        canonical_encode(demand.kind, demand.program_id, demand.context, demand.payload)
    )
    out += struct.pack(">BQ", _STATE_BYTE[demand.state], demand.access_number)
    out += struct.pack(">I", len(demand.timeline))
    for tier_id, ts in demand.timeline:
        out += _pack_text(tier_id)
        out += struct.pack(">q", ts)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedDemand("truncated demand bytes")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def rest(self) -> bytes:
        chunk = self.data[self.pos :]
        self.pos = len(self.data)
        return chunk


def demand_from_bytes(data: bytes) -> Demand:
    r = _Reader(data)
    version = r.u8()
    if version != ENCODING_VERSION:
        raise MalformedDemand(f"unknown demand encoding version {version:#04x}")
    kind_byte = r.u8()
    if kind_byte not in _BYTE_KIND:
        raise MalformedDemand(f"unknown demand kind byte {kind_byte:#04x}")
    kind = _BYTE_KIND[kind_byte]
    program_id = r.text()
    dims = []
    for _ in range(r.u32()):
        name = r.text()
        dims.append((name, r.i64()))
    payload = r.blob()
    state_byte = r.u8()
    if state_byte not in _BYTE_STATE:
        raise MalformedDemand(f"unknown demand state byte {state_byte:#04x}")
    access = r.u64()
    timeline = []
    for _ in range(r.u32()):
        tier = r.text()
        timeline.append((tier, r.i64()))
    base = make_demand(kind, program_id, Context(tuple(dims)), payload)
    return replace(
        base,
        state=_BYTE_STATE[state_byte],
        access_number=access,
        timeline=tuple(timeline),
    )


# Resource and system demands carry structured payloads; the tag byte keeps
# the two encodings disjoint.
_RESOURCE_TAG = 0x52
_SYSTEM_TAG = 0x53


def encode_resource_payload(resource_type_id: str, resource_id: str) -> bytes:
    return bytes([_RESOURCE_TAG]) + _pack_text(resource_type_id) + _pack_text(resource_id)


def decode_resource_payload(payload: bytes) -> tuple[str, str]:
    r = _Reader(payload)
    if r.u8() != _RESOURCE_TAG:
        raise MalformedDemand("not a resource payload")
    return r.text(), r.text()


def encode_system_payload(destination_tier_id: str, system_demand_type_id: str) -> bytes:
    return bytes([_SYSTEM_TAG]) + _pack_text(destination_tier_id) + _pack_text(system_demand_type_id)


def decode_system_payload(payload: bytes) -> tuple[str, str]:
    r = _Reader(payload)
    if r.u8() != _SYSTEM_TAG:
        raise MalformedDemand("not a system payload")
    return r.text(), r.text()


# Procedural demands name the worker function that executes them, followed by
# the argument blob the generator assembled. The name rides in the payload
# (and therefore in the signature), so the same function applied to the same
# arguments collapses to one entry no matter which program node demanded it.
_PROCEDURAL_TAG = 0x50


def encode_procedural_payload(worker: str, args_blob: bytes) -> bytes:
    return bytes([_PROCEDURAL_TAG]) + _pack_text(worker) + args_blob


def decode_procedural_payload(payload: bytes) -> tuple[str, bytes]:
    r = _Reader(payload)
    if r.u8() != _PROCEDURAL_TAG:
        raise MalformedDemand("not a procedural payload")
    worker = r.text()
    return worker, r.rest()


def procedural_worker(payload: bytes) -> str | None:
    """Worker name of a procedural payload, or None if it does not parse."""
    try:
        return decode_procedural_payload(payload)[0]
    except MalformedDemand:
        return None
