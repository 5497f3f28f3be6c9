"""Transport agent contract, shared request/reply machinery, and the factory.

An agent hides which broker implementation carries the traffic. Both
implementations speak the same envelope format and the same queue
semantics; the factory picks one from the configuration properties:

    gipsy.GEE.TA.implementation   "inproc" or "tcp-broker"
    gipsy.GEE.TA.primary          broker address (bus name / host:port)
    gipsy.GEE.TA.secondary        optional failover broker
    gipsy.GEE.TA.key              shared secret for frame MACs (UTF-8 text)
    gipsy.GEE.TA.max_frame        max payload bytes per frame
    gipsy.GEE.TA.heartbeat_ms     liveness probe interval (tcp only)

Request/reply runs over a per-agent reply queue: the caller wraps its
payload with the reply queue name, the responder unwraps it and sends a
RESULT envelope bearing the request's signature back on that queue.
``sync_call`` resends the request whenever the agent fails over to the
other broker mid-call, so a responder that also failed over still sees it;
responders are expected to tolerate duplicate requests (demand-store
operations are idempotent, which is what travels here in practice).
"""
from __future__ import annotations

import threading
import time
import uuid
from typing import Callable, Mapping, Optional

from .envelope import (
    DEFAULT_MAX_FRAME,
    EnvelopeKind,
    TransportEnvelope,
    TransportError,
    wrap_rpc,
)

KEY_IMPLEMENTATION = "gipsy.GEE.TA.implementation"
KEY_PRIMARY = "gipsy.GEE.TA.primary"
KEY_SECONDARY = "gipsy.GEE.TA.secondary"
KEY_SECRET = "gipsy.GEE.TA.key"
KEY_MAX_FRAME = "gipsy.GEE.TA.max_frame"
KEY_HEARTBEAT = "gipsy.GEE.TA.heartbeat_ms"

DEFAULT_HEARTBEAT_MS = 500
REPLY_QUEUE_PREFIX = "_rpl."


class UnknownImplementation(TransportError):
    """The implementation selector names no known transport agent."""

    def __init__(self, value: str):
        super().__init__(f"unknown transport agent implementation {value!r}")
        self.value = value


class MissingProperty(TransportError):
    def __init__(self, key: str):
        super().__init__(f"required transport property {key!r} is missing")
        self.key = key


class Timeout(TransportError):
    """A blocking call ran out of time before its condition was met."""


class AllBrokersDown(TransportError):
    def __init__(self, primary: str, secondary: Optional[str]):
        targets = primary if secondary is None else f"{primary} and {secondary}"
        super().__init__(f"no reachable broker ({targets})")
        self.primary = primary
        self.secondary = secondary


class TransportAgent:
    """Base class: config handling plus broker-independent sync_call."""

    def __init__(self, config: Mapping[str, str], agent_id: Optional[str] = None):
        self.properties = dict(config)
        self.agent_id = agent_id or "agent-" + uuid.uuid4().hex[:12]
        secret = self.properties.get(KEY_SECRET)
        self.key = secret.encode("utf-8") if secret else None
        self.max_frame = int(self.properties.get(KEY_MAX_FRAME, DEFAULT_MAX_FRAME))
        self.heartbeat_ms = int(self.properties.get(KEY_HEARTBEAT, DEFAULT_HEARTBEAT_MS))
        self.failover_count = 0
        self.insecure_rejected = 0
        self.on_insecure: Optional[Callable[[str], None]] = None
        self._rpc_lock = threading.Lock()
        self._reply_queue = REPLY_QUEUE_PREFIX + self.agent_id
        self._reply_ready = False

    # -- abstract queue operations (implemented per broker flavor) --------

    def subscribe(self, queue: str, consumer_id: Optional[str] = None, exclusive: bool = False) -> None:
        raise NotImplementedError

    def unsubscribe(self, queue: str, consumer_id: Optional[str] = None) -> None:
        raise NotImplementedError

    def send(self, queue: str, envelope: TransportEnvelope) -> None:
        """Enqueue on the live broker; returns once the enqueue is confirmed."""
        raise NotImplementedError

    def receive(
        self, queue: str, consumer_id: Optional[str] = None, timeout_ms: float = 1000
    ) -> Optional[TransportEnvelope]:
        raise NotImplementedError

    def ack(self, queue: str, consumer_id: Optional[str], envelope: TransportEnvelope) -> None:
        raise NotImplementedError

    def failover_probe(self) -> str:
        """Which broker the agent is bound to right now: primary or secondary."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    # -- request/reply ------------------------------------------------------

    @property
    def reply_queue(self) -> str:
        return self._reply_queue

    def _ensure_reply_queue(self) -> None:
        if not self._reply_ready:
            self.subscribe(self._reply_queue, self.agent_id)
            self._reply_ready = True

    def sync_call(
        self, queue: str, envelope: TransportEnvelope, timeout_ms: float = 5000
    ) -> TransportEnvelope:
        """Send a request and block for the RESULT with the same signature.

        One call at a time per agent; replies from earlier calls that timed
        out are drained and discarded by signature mismatch.
        """
        with self._rpc_lock:
            self._ensure_reply_queue()
            request = TransportEnvelope(
                envelope.kind,
                envelope.signature,
                wrap_rpc(self._reply_queue, envelope.payload),
            )
            deadline = time.monotonic() + timeout_ms / 1000.0
            sent_epoch = self.failover_count
            self.send(queue, request)
            slice_ms = max(50.0, float(self.heartbeat_ms))
            while True:
                remaining_ms = (deadline - time.monotonic()) * 1000.0
                if remaining_ms <= 0:
                    raise Timeout(f"no reply from queue {queue!r} within {timeout_ms} ms")
                if self.failover_count != sent_epoch:
                    sent_epoch = self.failover_count
                    self.send(queue, request)
                reply = self.receive(
                    self._reply_queue, self.agent_id, min(remaining_ms, slice_ms)
                )
                if reply is None:
                    continue
                self.ack(self._reply_queue, self.agent_id, reply)
                if reply.signature == envelope.signature:
                    return reply
                # stale answer to a call that already timed out; drop it

    def reply_to(self, request: TransportEnvelope, reply_queue: str, payload: bytes) -> None:
        """Answer an unwrapped request: RESULT envelope, same signature."""
        self.send(reply_queue, TransportEnvelope(EnvelopeKind.RESULT, request.signature, payload))


def create_agent(config: Mapping[str, str], agent_id: Optional[str] = None) -> TransportAgent:
    """Instantiate the transport agent named by the configuration."""
    impl = config.get(KEY_IMPLEMENTATION)
    if impl is None:
        raise MissingProperty(KEY_IMPLEMENTATION)
    if impl == "inproc":
        from .inproc import InprocAgent

        return InprocAgent(config, agent_id)
    if impl == "tcp-broker":
        from .tcp import TcpBrokerAgent

        return TcpBrokerAgent(config, agent_id)
    raise UnknownImplementation(impl)
