"""Runtime tiers and their assembly.

Four tier roles cooperate over the transport layer:

  DST  store service: owns the demand store and answers a small binary RPC
       protocol on the exclusive queue ``dst.rpc``. It announces new
       procedural work on per-function queues (``work.<function>``) and
       publishes completion events on transient per-signature queues
       (``_complete.<signature hex>``).
  DGT  generator: educes program identifiers recursively, one intensional
       demand per (identifier, context), claiming entries it computes
       itself and awaiting entries another tier already owns.
  DWT  worker: receives work notifications, checks out procedural demands
       its function table can execute, and completes them.
  GMT  manager: node and tier registry, heartbeat bookkeeping, and the
       event feed the management layer consumes.

Values stored for a demand are tagged: 0x00 + data for success, 0x01 plus
length-prefixed code and message for an error. Errors are values, so a
failed computation memoizes like any other and is never retried blindly.

Procedural arguments travel as a packed blob (u16 count, then u32-prefixed
byte strings); integers are signed 64-bit big-endian throughout.
"""
from __future__ import annotations

import json
import os
import struct
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .demand import (
    Context,
    Demand,
    DemandKind,
    DemandSignature,
    DemandState,
    append_timeline,
    decode_procedural_payload,
    demand_from_bytes,
    demand_to_bytes,
    encode_procedural_payload,
    make_demand,
    procedural_worker,
)
from .logutil import now_ms
from .program import (
    DemandProgram,
    OperatorDef,
    ProceduralDef,
    ProgramConflict,
    ProgramError,
    apply_operator,
    parse_program,
)
from .store import (
    DemandStore,
    InconsistentResult,
    NotOwner,
    StoreConfig,
    UnknownEntry,
)
from .transport import (
    KEY_IMPLEMENTATION,
    KEY_PRIMARY,
    KEY_SECONDARY,
    KEY_SECRET,
    AllBrokersDown,
    EnvelopeKind,
    ExclusiveConflict,
    NotSubscribed,
    TransportEnvelope,
    TransportError,
    create_agent,
    unwrap_rpc,
)
from .transport import Timeout as TransportTimeout
from .transport.inproc import InprocBroker, lookup_broker

RPC_QUEUE = "dst.rpc"
WORK_QUEUE_PREFIX = "work."
COMPLETE_QUEUE_PREFIX = "_complete."

TIER_TYPES = ("DGT", "DST", "DWT")


class TierError(Exception):
    """Base class for runtime tier errors."""


class DuplicateNodeId(TierError):
    def __init__(self, node_id: str):
        super().__init__(f"node {node_id!r} is already registered")
        self.node_id = node_id


class UnknownNode(TierError):
    def __init__(self, node_id: str):
        super().__init__(f"no node {node_id!r}")
        self.node_id = node_id


class UnknownTier(TierError):
    def __init__(self, tier_id: str):
        super().__init__(f"no tier {tier_id!r}")
        self.tier_id = tier_id


class UnknownTierType(TierError):
    def __init__(self, tier_type: str):
        super().__init__(f"unknown tier type {tier_type!r}")
        self.tier_type = tier_type


class LastRouteViolation(TierError):
    def __init__(self, tier_type: str):
        super().__init__(f"would leave a started instance with no {tier_type} tier")
        self.tier_type = tier_type


class UndefinedIdentifier(TierError):
    def __init__(self, identifier: str):
        super().__init__(f"no definition for {identifier!r}")
        self.identifier = identifier


class EvaluationFailure(TierError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class Timeout(TierError):
    """Educing did not finish before the caller's deadline."""


class StoreRpcError(TierError):
    """The store service answered with an error this client cannot type."""


# -- tagged values and argument blobs ------------------------------------------

_VALUE_OK = 0x00
_VALUE_ERROR = 0x01


def _pack_bytes(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _pack_text(text: str) -> bytes:
    return _pack_bytes(text.encode("utf-8"))


class _Cursor:
    """Forward-only reader for the fixed-width RPC encodings."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated message")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def rest(self) -> bytes:
        out = self.data[self.pos :]
        self.pos = len(self.data)
        return out


def ok_value(data: bytes) -> bytes:
    return bytes([_VALUE_OK]) + data


def error_value(code: str, message: str) -> bytes:
    return bytes([_VALUE_ERROR]) + _pack_text(code) + _pack_text(message)


def value_is_error(blob: bytes) -> bool:
    return bool(blob) and blob[0] == _VALUE_ERROR


def decode_error_value(blob: bytes) -> tuple[str, str]:
    c = _Cursor(blob, 1)
    return c.text(), c.text()


def value_data(blob: bytes) -> bytes:
    """Unwrap a tagged value; error values raise EvaluationFailure."""
    if not blob:
        raise EvaluationFailure("EmptyValue", "value blob is empty")
    if blob[0] == _VALUE_OK:
        return blob[1:]
    if blob[0] == _VALUE_ERROR:
        code, message = decode_error_value(blob)
        raise EvaluationFailure(code, message)
    raise EvaluationFailure("BadValueTag", f"unknown value tag 0x{blob[0]:02x}")


def encode_int(n: int) -> bytes:
    return struct.pack(">q", n)


def decode_int(data: bytes) -> int:
    if len(data) != 8:
        raise EvaluationFailure("BadInteger", f"expected 8 bytes, got {len(data)}")
    return struct.unpack(">q", data)[0]


def pack_args(values: list[bytes]) -> bytes:
    out = [struct.pack(">H", len(values))]
    out += [_pack_bytes(v) for v in values]
    return b"".join(out)


def unpack_args(blob: bytes) -> list[bytes]:
    c = _Cursor(blob)
    return [c.blob() for _ in range(c.u16())]


# -- store RPC protocol --------------------------------------------------------

_OP_DEPOSIT = 0x01
_OP_CHECKOUT = 0x02
_OP_COMPLETE = 0x03
_OP_LOOKUP = 0x04
_OP_CLAIM = 0x05
_OP_COUNTS = 0x10
_OP_ENTRIES = 0x11
_OP_METRICS = 0x12

_ST_OK = 0x00
_ST_ERR = 0xFF

_REMOTE_ERRORS = {
    "NotOwner": NotOwner,
    "InconsistentResult": InconsistentResult,
    "UnknownEntry": UnknownEntry,
}


def _raise_remote(name: str, detail: str):
    cls = _REMOTE_ERRORS.get(name)
    if cls is None:
        raise StoreRpcError(f"{name}: {detail}")
    # re-raise by type; the detail already carries the formatted message
    exc = cls.__new__(cls)
    Exception.__init__(exc, detail)
    raise exc


class StoreClient:
    """Caller side of the store RPC, used by generator and worker tiers."""

    def __init__(self, agent, rpc_timeout_ms: float = 10_000):
        self.agent = agent
        self.rpc_timeout_ms = rpc_timeout_ms

    def _call(self, payload: bytes) -> bytes:
        request = TransportEnvelope(EnvelopeKind.DEMAND, os.urandom(32), payload)
        try:
            reply = self.agent.sync_call(RPC_QUEUE, request, self.rpc_timeout_ms)
        except TransportTimeout as exc:
            raise Timeout(f"store rpc: {exc}") from exc
        body = reply.payload
        if not body:
            raise StoreRpcError("empty reply")
        if body[0] == _ST_ERR:
            c = _Cursor(body, 1)
            _raise_remote(c.text(), c.text())
        return body[1:]

    def deposit(self, demand: Demand) -> tuple[uuid.UUID, bytes | None]:
        body = self._call(bytes([_OP_DEPOSIT]) + demand_to_bytes(demand))
        c = _Cursor(body)
        gid = uuid.UUID(bytes=c.take(16))
        return gid, (c.rest() if c.u8() else None)

    def checkout(
        self,
        worker_id: str,
        kinds: tuple[DemandKind, ...] | None = None,
        workers: frozenset[str] | None = None,
    ) -> tuple[uuid.UUID, Demand] | None:
        req = [bytes([_OP_CHECKOUT]), _pack_text(worker_id)]
        req.append(bytes([len(kinds or ())]))
        req += [bytes([k.value]) for k in kinds or ()]
        if workers is None:
            req.append(b"\x00")
        else:
            req.append(b"\x01" + struct.pack(">H", len(workers)))
            req += [_pack_text(w) for w in sorted(workers)]
        body = self._call(b"".join(req))
        c = _Cursor(body)
        if not c.u8():
            return None
        gid = uuid.UUID(bytes=c.take(16))
        return gid, demand_from_bytes(c.rest())

    def complete(self, global_id: uuid.UUID, worker_id: str, value: bytes) -> None:
        self._call(
            bytes([_OP_COMPLETE]) + global_id.bytes + _pack_text(worker_id) + _pack_bytes(value)
        )

    def lookup(self, signature: DemandSignature) -> bytes | None:
        body = self._call(bytes([_OP_LOOKUP]) + signature.digest)
        c = _Cursor(body)
        return c.rest() if c.u8() else None

    def claim(self, global_id: uuid.UUID, owner_id: str) -> bool:
        body = self._call(bytes([_OP_CLAIM]) + global_id.bytes + _pack_text(owner_id))
        return bool(body[0])

    def counts(self) -> dict[str, int]:
        return json.loads(self._call(bytes([_OP_COUNTS])))

    def entries(self, state: str | None = None) -> list[dict]:
        return json.loads(self._call(bytes([_OP_ENTRIES]) + _pack_text(state or "")))

    def metrics(self) -> dict:
        return json.loads(self._call(bytes([_OP_METRICS])))


class StoreService:
    """DST: the demand store behind an exclusive RPC queue.

    A second service starting against the same bus gets ExclusiveConflict
    from the subscription and stays a standby. The sweeper repairs two
    kinds of loss on a timer: leases of dead workers expire back to
    Pending, and Pending entries nobody collected get re-announced.
    """

    def __init__(
        self,
        tier_id: str,
        agent,
        config: StoreConfig | None = None,
        *,
        sweep_ms: int = 200,
        announce_age_ms: int = 1000,
    ):
        self.tier_id = tier_id
        self.agent = agent
        self.sweep_ms = sweep_ms
        self.announce_age_ms = announce_age_ms
        self.store = DemandStore(
            config, on_new_pending=self._on_new_pending, on_completed=self._on_completed
        )
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        self.agent.subscribe(RPC_QUEUE, self.tier_id, exclusive=True)
        self._stop.clear()
        for target, label in ((self._serve, "rpc"), (self._sweep, "sweep")):
            t = threading.Thread(target=target, name=f"{self.tier_id}-{label}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()
        try:
            self.agent.unsubscribe(RPC_QUEUE, self.tier_id)
        except TransportError:
            pass

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                envelope = self.agent.receive(RPC_QUEUE, self.tier_id, 100)
            except NotSubscribed:
                return
            except AllBrokersDown:
                self._stop.wait(0.2)
                continue
            if envelope is None:
                continue
            reply_queue, inner = unwrap_rpc(envelope.payload)
            out = self._handle(inner)
            try:
                if reply_queue:
                    self.agent.reply_to(envelope, reply_queue, out)
                self.agent.ack(RPC_QUEUE, self.tier_id, envelope)
            except TransportError:
                pass  # the caller re-sends after failover

    def _sweep(self) -> None:
        while not self._stop.wait(self.sweep_ms / 1000.0):
            now = now_ms()
            self.store.expire_leases(now)
            for demand, gid in self.store.take_stale_pending(now, self.announce_age_ms):
                self._on_new_pending(demand, gid)
            self.store.gc(now)

    # hooks run on whatever thread touched the store; sends are best-effort,
    # the sweeper re-announces anything that fell on the floor
    def _on_new_pending(self, demand: Demand, global_id: uuid.UUID) -> None:
        if demand.kind is not DemandKind.PROCEDURAL:
            return
        worker = procedural_worker(demand.payload)
        if worker is None:
            return
        try:
            self.agent.send(
                WORK_QUEUE_PREFIX + worker,
                TransportEnvelope(EnvelopeKind.DEMAND, demand.signature.digest, b""),
            )
        except TransportError:
            pass

    def _on_completed(self, signature: DemandSignature, value: bytes) -> None:
        try:
            self.agent.send(
                COMPLETE_QUEUE_PREFIX + signature.hex,
                TransportEnvelope(EnvelopeKind.RESULT, signature.digest, value),
            )
        except TransportError:
            pass

    def _handle(self, body: bytes) -> bytes:
        try:
            c = _Cursor(body)
            op = c.u8()
            if op == _OP_DEPOSIT:
                demand = demand_from_bytes(c.rest())
                last = demand.timeline[-1][1] if demand.timeline else 0
                demand = append_timeline(demand, self.tier_id, max(now_ms(), last))
                gid, value = self.store.deposit(demand, now_ms())
                if value is None:
                    return bytes([_ST_OK]) + gid.bytes + b"\x00"
                return bytes([_ST_OK]) + gid.bytes + b"\x01" + value
            if op == _OP_CHECKOUT:
                worker_id = c.text()
                kinds = tuple(DemandKind(c.u8()) for _ in range(c.u8()))
                workers = None
                if c.u8():
                    workers = frozenset(c.text() for _ in range(c.u16()))
                got = self.store.checkout_entry(worker_id, now_ms(), kinds or None, workers)
                if got is None:
                    return bytes([_ST_OK, 0])
                gid, demand = got
                return bytes([_ST_OK, 1]) + gid.bytes + demand_to_bytes(demand)
            if op == _OP_COMPLETE:
                gid = uuid.UUID(bytes=c.take(16))
                worker_id = c.text()
                self.store.complete(gid, worker_id, c.blob(), now_ms())
                return bytes([_ST_OK])
            if op == _OP_LOOKUP:
                value = self.store.lookup(DemandSignature(c.take(32)), now_ms())
                if value is None:
                    return bytes([_ST_OK, 0])
                return bytes([_ST_OK, 1]) + value
            if op == _OP_CLAIM:
                gid = uuid.UUID(bytes=c.take(16))
                return bytes([_ST_OK, 1 if self.store.claim(gid, c.text(), now_ms()) else 0])
            if op == _OP_COUNTS:
                counts = {state.value: n for state, n in self.store.counts().items()}
                return bytes([_ST_OK]) + json.dumps(counts).encode("utf-8")
            if op == _OP_ENTRIES:
                state_text = c.text()
                state = DemandState(state_text) if state_text else None
                rows = [
                    {
                        "signature": e.demand.signature.hex,
                        "kind": e.demand.kind.name.lower(),
                        "program_id": e.demand.program_id,
                        "context": e.demand.context.as_dict(),
                        "state": e.state.value,
                        "owner": e.owner,
                        "stored_at": e.stored_at,
                        "hits": e.hits,
                        "timeline": list(e.demand.timeline),
                    }
                    for e in self.store.entries_by_state(state)
                ]
                return bytes([_ST_OK]) + json.dumps(rows).encode("utf-8")
            if op == _OP_METRICS:
                return bytes([_ST_OK]) + json.dumps(self.store.metrics).encode("utf-8")
            raise StoreRpcError(f"unknown op 0x{op:02x}")
        except Exception as exc:
            return bytes([_ST_ERR]) + _pack_text(type(exc).__name__) + _pack_text(str(exc))


# -- generator tier ------------------------------------------------------------

class DemandGenerator:
    """DGT: educes program identifiers against the store.

    Every non-literal node becomes an intensional demand keyed by
    (program, identifier, context). The generator that wins the claim
    computes the node; everyone else awaits the completion event with a
    lookup poll as the fallback, so a lost event costs latency, never
    correctness.
    """

    def __init__(self, tier_id: str, agent, store: StoreClient, *, poll_ms: int = 200):
        self.tier_id = tier_id
        self.agent = agent
        self.store = store
        self.poll_ms = poll_ms
        self.programs: dict[str, DemandProgram] = {}

    def register_program(self, program: DemandProgram | str) -> DemandProgram:
        if isinstance(program, str):
            program = parse_program(program)
        program.validate()
        known = self.programs.get(program.program_id)
        if known is not None:
            if known.body_digest() != program.body_digest():
                raise ProgramConflict(program.program_id)
            return known
        self.programs[program.program_id] = program
        return program

    def evaluate(
        self,
        program_id: str,
        identifier: str,
        context: Mapping[str, int],
        timeout_ms: float = 30_000,
    ) -> bytes:
        program = self.programs.get(program_id)
        if program is None:
            raise UndefinedIdentifier(f"{program_id}:{identifier}")
        deadline = time.monotonic() + timeout_ms / 1000.0
        try:
            value = self._educe(program, identifier, dict(context), deadline)
        except RecursionError:
            raise EvaluationFailure(
                "RecursionOverflow", f"{identifier} exceeded the interpreter depth"
            ) from None
        return value_data(value)

    def _educe(
        self, program: DemandProgram, identifier: str, ctx: dict[str, int], deadline: float
    ) -> bytes:
        if time.monotonic() > deadline:
            raise Timeout(f"deadline passed while educing {identifier!r}")
        node = program.nodes.get(identifier)
        if node is None:
            raise UndefinedIdentifier(identifier)
        if isinstance(node, OperatorDef):
            # literals never touch the store
            if node.op == "const":
                return ok_value(encode_int(node.literal))
            if node.op == "dim":
                if node.dim_name not in ctx:
                    return error_value("MissingDimension", node.dim_name)
                return ok_value(encode_int(ctx[node.dim_name]))
        demand = make_demand(
            DemandKind.INTENSIONAL,
            program.program_id,
            Context(tuple(ctx.items())),
            identifier.encode("utf-8"),
            origin_tier=self.tier_id,
            now=now_ms(),
        )
        gid, value = self.store.deposit(demand)
        if value is not None:
            return value
        if not self.store.claim(gid, self.tier_id):
            return self._await(demand.signature, deadline)
        try:
            value = self._compute(program, node, ctx, deadline)
        except EvaluationFailure as exc:
            value = error_value(exc.code, exc.message)
        except (UndefinedIdentifier, ProgramError) as exc:
            value = error_value(type(exc).__name__, str(exc))
        # a Timeout or transport failure propagates instead: the entry stays
        # Processing and the store's lease expiry re-pends it
        try:
            self.store.complete(gid, self.tier_id, value)
        except NotOwner:
            stored = self.store.lookup(demand.signature)
            if stored is None:
                raise
            return stored
        return value

    def _compute(
        self,
        program: DemandProgram,
        node: OperatorDef | ProceduralDef,
        ctx: dict[str, int],
        deadline: float,
    ) -> bytes:
        def arg_context(spec) -> dict[str, int]:
            t = spec.transform
            if t is None:
                return ctx
            c = dict(ctx)
            if t.mode == "shift":
                c[t.dim] = c.get(t.dim, 0) + t.amount
            elif t.mode == "set":
                c[t.dim] = t.amount
            else:
                pointer = self._educe(program, t.source, ctx, deadline)
                c[t.dim] = decode_int(value_data(pointer))
            return c

        def arg_value(spec) -> bytes:
            return self._educe(program, spec.identifier, arg_context(spec), deadline)

        if isinstance(node, ProceduralDef):
            blobs = [value_data(arg_value(a)) for a in node.args]
            return self._procedural(program, node.worker, blobs, deadline)
        if node.op == "if":
            cond = decode_int(value_data(arg_value(node.args[0])))
            return arg_value(node.args[1] if cond != 0 else node.args[2])
        ints = [decode_int(value_data(arg_value(a))) for a in node.args]
        return ok_value(encode_int(apply_operator(node.op, ints)))

    def _procedural(
        self, program: DemandProgram, worker: str, args: list[bytes], deadline: float
    ) -> bytes:
        return call_procedural(
            self.agent,
            self.store,
            self.tier_id,
            program.program_id,
            worker,
            args,
            deadline,
            poll_ms=self.poll_ms,
        )

    def _await(self, signature: DemandSignature, deadline: float) -> bytes:
        queue = COMPLETE_QUEUE_PREFIX + signature.hex
        self.agent.subscribe(queue, self.tier_id)
        try:
            value = self.store.lookup(signature)
            if value is not None:
                return value
            return await_value(
                self.agent, self.store, self.tier_id, signature, deadline, self.poll_ms
            )
        finally:
            self.agent.unsubscribe(queue, self.tier_id)


def call_procedural(
    agent,
    store: StoreClient,
    caller_id: str,
    program_id: str,
    worker: str,
    args: list[bytes],
    deadline: float,
    *,
    poll_ms: int = 200,
) -> bytes:
    """Deposit one procedural demand and wait for its value (tagged form).

    Anyone holding an agent and a store client can drive worker tiers this
    way; the generator's proc stanzas and the recognition pipeline both
    funnel through here.
    """
    payload = encode_procedural_payload(worker, pack_args(args))
    demand = make_demand(
        DemandKind.PROCEDURAL,
        program_id,
        Context(()),
        payload,
        origin_tier=caller_id,
        now=now_ms(),
    )
    queue = COMPLETE_QUEUE_PREFIX + demand.signature.hex
    # subscribe before depositing so the completion event cannot slip
    # between the memo miss and the wait
    agent.subscribe(queue, caller_id)
    try:
        gid, value = store.deposit(demand)
        if value is not None:
            return value
        return await_value(agent, store, caller_id, demand.signature, deadline, poll_ms)
    finally:
        agent.unsubscribe(queue, caller_id)


def await_value(
    agent,
    store: StoreClient,
    caller_id: str,
    signature: DemandSignature,
    deadline: float,
    poll_ms: int,
) -> bytes:
    """Wait on an already-subscribed completion queue, falling back to lookup.

    Completion events rotate to a single consumer, so a second waiter on the
    same signature polls the warehouse instead of starving.
    """
    queue = COMPLETE_QUEUE_PREFIX + signature.hex
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise Timeout(f"no result for {signature.hex[:12]} before deadline")
        try:
            envelope = agent.receive(queue, caller_id, min(poll_ms, remaining * 1000.0))
        except AllBrokersDown:
            time.sleep(0.1)
            envelope = None
        if envelope is not None:
            agent.ack(queue, caller_id, envelope)
            if envelope.signature == signature.digest:
                return envelope.payload
            continue
        value = store.lookup(signature)
        if value is not None:
            return value


# -- worker tier ---------------------------------------------------------------

class DemandWorker:
    """DWT: one receive loop per function queue, checkout per notification.

    Exactly one checkout is attempted per received notification; the
    sweeper's re-announcements repair losses. That keeps the work split
    across workers identical to the broker's rotation.
    """

    def __init__(
        self,
        tier_id: str,
        agent,
        store: StoreClient,
        functions: Mapping[str, Callable[[list[bytes]], bytes]],
        *,
        poll_ms: int = 200,
    ):
        if not functions:
            raise ValueError("a worker tier needs at least one function")
        self.tier_id = tier_id
        self.agent = agent
        self.store = store
        self.functions = dict(functions)
        self.poll_ms = poll_ms
        self.execution_counts = {name: 0 for name in self.functions}
        self._counts_lock = threading.Lock()
        self._fault_lock = threading.Lock()
        self._fail_next_checkout = False
        self._dead = False
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def alive(self) -> bool:
        return not self._dead and not self._stop.is_set()

    def start(self) -> None:
        self._stop.clear()
        for name in self.functions:
            self.agent.subscribe(WORK_QUEUE_PREFIX + name, self.tier_id)
        for name in self.functions:
            t = threading.Thread(
                target=self._loop, args=(name,), name=f"{self.tier_id}-{name}", daemon=True
            )
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()

    def kill(self) -> None:
        """Fault injection: crash after the next checkout, lease in hand."""
        self._fail_next_checkout = True

    def _loop(self, worker_name: str) -> None:
        queue = WORK_QUEUE_PREFIX + worker_name
        while not self._stop.is_set() and not self._dead:
            try:
                envelope = self.agent.receive(queue, self.tier_id, self.poll_ms)
            except NotSubscribed:
                return
            except AllBrokersDown:
                self._stop.wait(0.2)
                continue
            if envelope is None:
                continue
            try:
                self._on_notification(queue, envelope)
            except (Timeout, StoreRpcError, TransportError):
                continue  # unacked notification comes back; checkout is safe to redo

    def _on_notification(self, queue: str, envelope) -> None:
        got = self.store.checkout(
            self.tier_id, kinds=(DemandKind.PROCEDURAL,), workers=frozenset(self.functions)
        )
        if got is not None:
            with self._fault_lock:
                if self._fail_next_checkout:
                    self._fail_next_checkout = False
                    self._dead = True
                    self.agent.close()  # drops subscriptions, never completes
                    return
            gid, demand = got
            value = self._execute(demand)
            try:
                self.store.complete(gid, self.tier_id, value)
            except (NotOwner, InconsistentResult):
                pass  # lease expired underneath us; someone else answered
        self.agent.ack(queue, self.tier_id, envelope)

    def _execute(self, demand: Demand) -> bytes:
        try:
            worker, blob = decode_procedural_payload(demand.payload)
        except Exception as exc:
            return error_value("MalformedPayload", str(exc))
        fn = self.functions.get(worker)
        if fn is None:
            return error_value("UnknownWorker", worker)
        with self._counts_lock:
            self.execution_counts[worker] += 1
        try:
            return ok_value(fn(unpack_args(blob)))
        except Exception as exc:
            # the exception type travels as the error code so callers can
            # rebuild a typed failure on their side
            return error_value(type(exc).__name__, f"{worker}: {exc}")


def hamming_worker_functions() -> dict[str, Callable[[list[bytes]], bytes]]:
    """The scaling leaves of the built-in workload."""

    def scale(factor: int):
        def fn(args: list[bytes]) -> bytes:
            return encode_int(factor * decode_int(args[0]))

        return fn

    return {"scale2": scale(2), "scale3": scale(3), "scale5": scale(5)}


# -- manager tier ---------------------------------------------------------------

@dataclass
class TierRecord:
    tier_id: str
    node_id: str
    tier_type: str
    state: str = "allocated"  # allocated | started | stopped


@dataclass
class NodeRecord:
    node_id: str
    descriptor: dict
    state: str = "up"  # up | down
    last_beat: int = 0
    tiers: dict[str, TierRecord] = field(default_factory=dict)


class GeneralManager:
    """GMT: node and tier registry, heartbeats, and the runtime event feed.

    A node is declared down after three missed beat intervals. Events are
    sequence-numbered and kept in a bounded ring so a late consumer can
    resume from the last number it saw.
    """

    def __init__(self, beat_interval_ms: int = 1000, event_capacity: int = 1000):
        self.beat_interval_ms = beat_interval_ms
        self.instance_state = "stopped"
        self._lock = threading.RLock()
        self._nodes: dict[str, NodeRecord] = {}
        self._listeners: list[Callable[[dict], None]] = []
        self._events: deque[dict] = deque(maxlen=event_capacity)
        self._seq = 0
        self._tier_seq = 0

    def add_listener(self, fn: Callable[[dict], None]) -> None:
        with self._lock:
            self._listeners.append(fn)

    def remove_listener(self, fn: Callable[[dict], None]) -> None:
        with self._lock:
            if fn in self._listeners:
                self._listeners.remove(fn)

    def emit(self, kind: str, **fields) -> dict:
        with self._lock:
            self._seq += 1
            event = {"seq": self._seq, "ts": now_ms(), "event": kind, **fields}
            self._events.append(event)
            listeners = list(self._listeners)
        for fn in listeners:
            fn(event)
        return event

    def events_since(self, seq: int = 0) -> list[dict]:
        with self._lock:
            return [e for e in self._events if e["seq"] > seq]

    # -- nodes -----------------------------------------------------------

    def register_node(self, descriptor: Mapping) -> str:
        node_id = descriptor.get("node_id") or f"node-{uuid.uuid4().hex[:8]}"
        with self._lock:
            if node_id in self._nodes:
                raise DuplicateNodeId(node_id)
            self._nodes[node_id] = NodeRecord(node_id, dict(descriptor), last_beat=now_ms())
        self.emit("node_registered", node_id=node_id)
        return node_id

    def heartbeat(self, node_id: str, now: int | None = None) -> None:
        recovered = False
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                raise UnknownNode(node_id)
            node.last_beat = now_ms() if now is None else now
            if node.state == "down":
                node.state = "up"
                recovered = True
        if recovered:
            self.emit("node_up", node_id=node_id)

    def find_node(self, node_id: str) -> NodeRecord:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                raise UnknownNode(node_id)
            return node

    def remove_node(self, node_id: str) -> None:
        """Drop a node record; its tiers must be deallocated first."""
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                raise UnknownNode(node_id)
            if node.tiers:
                raise TierError(f"node {node_id!r} still has {len(node.tiers)} tier(s)")
            del self._nodes[node_id]
        self.emit("node_removed", node_id=node_id)

    def check_beats(self, now: int | None = None) -> list[str]:
        """Mark nodes down after three missed beats; returns the new ones."""
        now = now_ms() if now is None else now
        horizon = 3 * self.beat_interval_ms
        lost = []
        with self._lock:
            for node in self._nodes.values():
                if node.state == "up" and now - node.last_beat > horizon:
                    node.state = "down"
                    lost.append(node.node_id)
        for node_id in lost:
            self.emit("node_down", node_id=node_id)
        return lost

    # -- tiers -----------------------------------------------------------

    def allocate_tier(self, node_id: str, tier_type: str, tier_id: str | None = None) -> str:
        """Attach a tier record; an explicit `tier_id` lets a network file
        restore the exact identifiers it saved."""
        if tier_type not in TIER_TYPES:
            raise UnknownTierType(tier_type)
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                raise UnknownNode(node_id)
            if tier_id is None:
                self._tier_seq += 1
                tier_id = f"{node_id}/{tier_type.lower()}{self._tier_seq}"
            else:
                taken = any(tier_id in n.tiers for n in self._nodes.values())
                if taken:
                    raise TierError(f"tier id {tier_id!r} is already allocated")
                # keep the counter ahead of any numeric suffix so generated
                # ids never collide with restored ones
                digits = "".join(ch for ch in tier_id if ch.isdigit())
                if digits:
                    self._tier_seq = max(self._tier_seq, int(digits[-9:]))
            node.tiers[tier_id] = TierRecord(tier_id, node_id, tier_type)
        self.emit("tier_allocated", node_id=node_id, tier_id=tier_id, tier_type=tier_type)
        return tier_id

    def deallocate_tier(
        self, node_id: str, tier_type: str, tier_ids: list[str], force: bool = False
    ) -> int:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                raise UnknownNode(node_id)
            for tier_id in tier_ids:
                tier = node.tiers.get(tier_id)
                if tier is None or tier.tier_type != tier_type:
                    raise UnknownTier(tier_id)
            if not force and self.instance_state == "started":
                doomed = set(tier_ids)
                survivors = sum(
                    1
                    for n in self._nodes.values()
                    for t in n.tiers.values()
                    if t.tier_type == tier_type
                    and t.tier_id not in doomed
                    and t.state != "stopped"
                )
                if survivors == 0:
                    raise LastRouteViolation(tier_type)
            for tier_id in tier_ids:
                del node.tiers[tier_id]
        for tier_id in tier_ids:
            self.emit("tier_deallocated", node_id=node_id, tier_id=tier_id, tier_type=tier_type)
        return len(tier_ids)

    def find_tier(self, tier_id: str) -> TierRecord:
        with self._lock:
            for node in self._nodes.values():
                tier = node.tiers.get(tier_id)
                if tier is not None:
                    return tier
        raise UnknownTier(tier_id)

    def set_tier_state(self, tier_id: str, state: str) -> None:
        tier = self.find_tier(tier_id)
        with self._lock:
            tier.state = state
        self.emit("tier_state", tier_id=tier_id, tier_type=tier.tier_type, state=state)

    def tiers(self, tier_type: str | None = None, state: str | None = None) -> list[TierRecord]:
        with self._lock:
            return [
                t
                for n in self._nodes.values()
                for t in sorted(n.tiers.values(), key=lambda t: t.tier_id)
                if (tier_type is None or t.tier_type == tier_type)
                and (state is None or t.state == state)
            ]

    # -- instance --------------------------------------------------------

    def start_instance(self) -> None:
        with self._lock:
            for tier_type in TIER_TYPES:
                if not any(
                    t.tier_type == tier_type
                    for n in self._nodes.values()
                    for t in n.tiers.values()
                ):
                    raise LastRouteViolation(tier_type)
            self.instance_state = "started"
        self.emit("instance_state", state="started")

    def stop_instance(self) -> None:
        with self._lock:
            self.instance_state = "stopped"
        self.emit("instance_state", state="stopped")

    def topology(self) -> dict:
        with self._lock:
            return {
                "instance": self.instance_state,
                "beat_interval_ms": self.beat_interval_ms,
                "nodes": [
                    {
                        "node_id": n.node_id,
                        "state": n.state,
                        "last_beat": n.last_beat,
                        "tiers": [
                            {
                                "tier_id": t.tier_id,
                                "tier_type": t.tier_type,
                                "state": t.state,
                            }
                            for t in sorted(n.tiers.values(), key=lambda t: t.tier_id)
                        ],
                    }
                    for n in sorted(self._nodes.values(), key=lambda n: n.node_id)
                ],
            }


# -- the assembly ----------------------------------------------------------------

class GipsyRuntime:
    """A whole instance: transport, manager, and live tiers in one process.

    The default transport is an in-process bus with a private name, so
    parallel runtimes in one test process never share queues. Against a
    TCP broker pair the same assembly rides the failover logic of the
    agents without any code here noticing.
    """

    def __init__(
        self,
        transport_config: Mapping[str, str] | None = None,
        *,
        store_config: StoreConfig | None = None,
        beat_interval_ms: int = 250,
        sweep_ms: int = 100,
        announce_age_ms: int = 1000,
        poll_ms: int = 200,
        rpc_timeout_ms: float = 10_000,
    ):
        if transport_config is None:
            transport_config = {
                KEY_IMPLEMENTATION: "inproc",
                KEY_PRIMARY: f"gee-{uuid.uuid4().hex[:8]}",
                KEY_SECRET: uuid.uuid4().hex,
            }
        self.config = dict(transport_config)
        self.store_config = store_config
        self.sweep_ms = sweep_ms
        self.announce_age_ms = announce_age_ms
        self.poll_ms = poll_ms
        self.rpc_timeout_ms = rpc_timeout_ms
        self._owned_brokers: list[InprocBroker] = []
        if self.config.get(KEY_IMPLEMENTATION, "inproc") == "inproc":
            for key in (KEY_PRIMARY, KEY_SECONDARY):
                name = self.config.get(key)
                if name and lookup_broker(name) is None:
                    self._owned_brokers.append(InprocBroker(name))
        self.gmt = GeneralManager(beat_interval_ms)
        self.worker_functions: dict[str, Callable[[list[bytes]], bytes]] = (
            hamming_worker_functions()
        )
        self._programs: dict[str, DemandProgram] = {}
        self._live: dict[str, object] = {}
        self._agents: dict[str, object] = {}
        self._tier_functions: dict[str, dict | None] = {}
        self._beats: dict[str, threading.Event] = {}
        self._monitor_stop: threading.Event | None = None
        self._threads: list[threading.Thread] = []
        self._started = False

    @property
    def started(self) -> bool:
        return self._started

    # -- topology operations ----------------------------------------------

    def add_node(self, node_id: str | None = None, **descriptor) -> str:
        node_id = self.gmt.register_node({"node_id": node_id, **descriptor})
        if self._started:
            self._start_beats(node_id)
        return node_id

    def allocate(
        self,
        node_id: str,
        tier_type: str,
        functions: Mapping[str, Callable] | None = None,
        *,
        start: bool = True,
        tier_id: str | None = None,
    ) -> str:
        """Allocate a tier; `start=False` leaves it a warm standby."""
        tier_id = self.gmt.allocate_tier(node_id, tier_type, tier_id)
        self._tier_functions[tier_id] = dict(functions) if functions is not None else None
        if self._started and start:
            self.start_tier(tier_id)
        return tier_id

    def deallocate(
        self, node_id: str, tier_type: str, tier_ids: list[str], force: bool = False
    ) -> int:
        count = self.gmt.deallocate_tier(node_id, tier_type, tier_ids, force)
        for tier_id in tier_ids:
            self._stop_live(tier_id)
        return count

    def register_program(self, program: DemandProgram | str, replace: bool = False) -> DemandProgram:
        if isinstance(program, str):
            program = parse_program(program)
        program.validate()
        known = self._programs.get(program.program_id)
        if known is not None and known.body_digest() != program.body_digest() and not replace:
            raise ProgramConflict(program.program_id)
        self._programs[program.program_id] = program
        for live in self._live.values():
            if isinstance(live, DemandGenerator):
                live.register_program(program)
        return program

    def programs(self) -> dict[str, DemandProgram]:
        return dict(self._programs)

    def forget_program(self, program_id: str) -> None:
        self._programs.pop(program_id, None)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self.gmt.start_instance()
        # stores first so work announcements have an authority to land in,
        # then workers, then generators
        order = {"DST": 0, "DWT": 1, "DGT": 2}
        for tier in sorted(self.gmt.tiers(), key=lambda t: (order[t.tier_type], t.tier_id)):
            if tier.state == "allocated":
                self.start_tier(tier.tier_id)
        for node in self.gmt.topology()["nodes"]:
            self._start_beats(node["node_id"])
        self._monitor_stop = threading.Event()
        t = threading.Thread(target=self._monitor, name="gmt-monitor", daemon=True)
        t.start()
        self._threads.append(t)
        self._started = True

    def start_tier(self, tier_id: str) -> None:
        tier = self.gmt.find_tier(tier_id)
        if tier.state == "started" or tier_id in self._live:
            return
        agent = create_agent(self.config, tier_id)
        if tier.tier_type == "DST":
            service = StoreService(
                tier_id,
                agent,
                self.store_config,
                sweep_ms=self.sweep_ms,
                announce_age_ms=self.announce_age_ms,
            )
            try:
                service.start()
            except ExclusiveConflict:
                # another store holds the queue; stay allocated as a standby
                agent.close()
                self.gmt.emit("tier_standby", tier_id=tier_id, tier_type="DST")
                return
            live: object = service
        elif tier.tier_type == "DWT":
            functions = self._tier_functions.get(tier_id) or dict(self.worker_functions)
            worker = DemandWorker(
                tier_id,
                agent,
                StoreClient(agent, self.rpc_timeout_ms),
                functions,
                poll_ms=self.poll_ms,
            )
            worker.start()
            live = worker
        elif tier.tier_type == "DGT":
            generator = DemandGenerator(
                tier_id, agent, StoreClient(agent, self.rpc_timeout_ms), poll_ms=self.poll_ms
            )
            for program in self._programs.values():
                generator.register_program(program)
            live = generator
        else:
            raise UnknownTierType(tier.tier_type)
        self._agents[tier_id] = agent
        self._live[tier_id] = live
        self.gmt.set_tier_state(tier_id, "started")

    def stop_tier(self, tier_id: str) -> None:
        self.gmt.set_tier_state(tier_id, "stopped")
        self._stop_live(tier_id)

    def start_node(self, node_id: str) -> None:
        """Bring a node back: beats resume, its idle tiers start."""
        self.gmt.heartbeat(node_id)  # raises UnknownNode; marks the node up
        for tier in self.gmt.tiers():
            if tier.node_id == node_id and tier.state != "started":
                self.start_tier(tier.tier_id)
        if self._started:
            self._start_beats(node_id)

    def stop_node(self, node_id: str) -> None:
        """Administrative stop: tiers go down, beats cease, and the
        monitor reports the node down like any other loss."""
        self.gmt.find_node(node_id)
        stop = self._beats.pop(node_id, None)
        if stop is not None:
            stop.set()
        for tier in self.gmt.tiers():
            if tier.node_id == node_id and tier.state == "started":
                self.stop_tier(tier.tier_id)

    def _stop_live(self, tier_id: str) -> None:
        live = self._live.pop(tier_id, None)
        if isinstance(live, (StoreService, DemandWorker)):
            live.stop()
        agent = self._agents.pop(tier_id, None)
        if agent is not None:
            agent.close()
        self._tier_functions.pop(tier_id, None)

    def stop(self) -> None:
        if self._monitor_stop is not None:
            self._monitor_stop.set()
        for stop in self._beats.values():
            stop.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()
        self._beats.clear()
        for tier_id in list(self._live):
            self._stop_live(tier_id)
        self.gmt.stop_instance()
        for broker in self._owned_brokers:
            broker.kill()
        self._started = False

    # -- heartbeats and monitoring ----------------------------------------

    def _start_beats(self, node_id: str) -> None:
        if node_id in self._beats:
            return
        stop = threading.Event()
        self._beats[node_id] = stop

        def beat():
            interval = self.gmt.beat_interval_ms / 1000.0
            while not stop.wait(interval):
                try:
                    self.gmt.heartbeat(node_id)
                except UnknownNode:
                    return

        t = threading.Thread(target=beat, name=f"beat-{node_id}", daemon=True)
        t.start()
        self._threads.append(t)

    def _monitor(self) -> None:
        interval = self.gmt.beat_interval_ms / 2000.0
        while not self._monitor_stop.wait(interval):
            self.gmt.check_beats()

    # -- work --------------------------------------------------------------

    def generator(self, tier_id: str | None = None) -> DemandGenerator:
        if tier_id is not None:
            live = self._live.get(tier_id)
            if not isinstance(live, DemandGenerator):
                raise UnknownTier(tier_id)
            return live
        for tid in sorted(self._live):
            if isinstance(self._live[tid], DemandGenerator):
                return self._live[tid]
        raise TierError("no generator tier is running")

    def store_service(self) -> StoreService:
        for tid in sorted(self._live):
            if isinstance(self._live[tid], StoreService):
                return self._live[tid]
        raise TierError("no store tier is running")

    def new_client(self, agent_id: str | None = None) -> StoreClient:
        """A standalone store client with its own transport agent."""
        agent = create_agent(self.config, agent_id or f"client-{uuid.uuid4().hex[:8]}")
        return StoreClient(agent, self.rpc_timeout_ms)

    def evaluate(
        self,
        program_id: str,
        identifier: str,
        context: Mapping[str, int],
        timeout_ms: float = 30_000,
        tier_id: str | None = None,
    ) -> bytes:
        return self.generator(tier_id).evaluate(program_id, identifier, context, timeout_ms)

    def worker_execution_counts(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for live in self._live.values():
            if isinstance(live, DemandWorker):
                for name, count in live.execution_counts.items():
                    totals[name] = totals.get(name, 0) + count
        return totals

    # -- fault injection -----------------------------------------------------

    def kill_worker(self, tier_id: str) -> None:
        live = self._live.get(tier_id)
        if not isinstance(live, DemandWorker):
            raise UnknownTier(tier_id)
        live.kill()

    def kill_node(self, node_id: str) -> None:
        """Abrupt loss: beats stop, tier threads die, subscriptions drop."""
        stop = self._beats.pop(node_id, None)
        if stop is not None:
            stop.set()
        for tier in list(self.gmt.tiers()):
            if tier.node_id == node_id and tier.tier_id in self._live:
                self._stop_live(tier.tier_id)

    def kill_primary_broker(self) -> None:
        if self.config.get(KEY_IMPLEMENTATION, "inproc") != "inproc":
            raise TierError("external brokers are killed by their own process handle")
        broker = lookup_broker(self.config[KEY_PRIMARY])
        if broker is not None:
            broker.kill()
