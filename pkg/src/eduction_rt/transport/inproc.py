"""In-process broker twin of the TCP broker, for tests and single-node runs.

Brokers live in a process-wide registry keyed by bus name, so independent
agents reach the same queues by configuring the same name. ``kill()`` makes
a broker refuse everything, which is how fault-injection simulates a broker
crash without sockets: agents observe BrokerClosed mid-call and fail over
to the secondary bus exactly like the TCP agent does on a dead socket.
Whatever the killed broker still held is gone, as with a real crash;
recovery of in-flight work belongs to the layers above.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from typing import Mapping, Optional

from .agent import (
    KEY_PRIMARY,
    KEY_SECONDARY,
    AllBrokersDown,
    TransportAgent,
)
from .core import BrokerClosed, BrokerCore
from .envelope import (
    MacMismatch,
    MalformedFrame,
    TransportEnvelope,
    decode_frame,
    encode_frame,
)

_registry: dict[str, "InprocBroker"] = {}
_registry_lock = threading.Lock()


class InprocBroker:
    """A broker inside the current process, addressable by bus name."""

    def __init__(self, name: str = "default"):
        self.name = name
        self.core = BrokerCore(name)
        with _registry_lock:
            _registry[name] = self

    @property
    def alive(self) -> bool:
        return self.core.alive

    def kill(self) -> None:
        self.core.close()


def lookup_broker(name: str) -> Optional[InprocBroker]:
    with _registry_lock:
        return _registry.get(name)


def reset_brokers() -> None:
    """Drop every registered bus; test isolation helper."""
    with _registry_lock:
        for broker in _registry.values():
            broker.core.close()
        _registry.clear()


class InprocAgent(TransportAgent):
    def __init__(self, config: Mapping[str, str], agent_id: Optional[str] = None):
        super().__init__(config, agent_id)
        self._primary_name = self.properties.get(KEY_PRIMARY, "default")
        self._secondary_name = self.properties.get(KEY_SECONDARY)
        self._binding = "primary"
        self._lock = threading.Lock()
        self._subs: dict[tuple[str, str], bool] = {}
        self._outstanding: dict[tuple[str, str], deque] = {}

    # -- broker resolution -------------------------------------------------

    def _broker_for(self, which: str) -> Optional[InprocBroker]:
        name = self._primary_name if which == "primary" else self._secondary_name
        return lookup_broker(name) if name else None

    def _core(self) -> BrokerCore:
        """Resolve the bound broker, failing over once if it is dead."""
        with self._lock:
            current = self._broker_for(self._binding)
            if current is not None and current.alive:
                return current.core
            other = "secondary" if self._binding == "primary" else "primary"
            fallback = self._broker_for(other)
            if fallback is None or not fallback.alive:
                raise AllBrokersDown(self._primary_name, self._secondary_name)
            self._binding = other
            self.failover_count += 1
            self._outstanding.clear()  # delivery ids died with the old broker
            for (queue, consumer), exclusive in self._subs.items():
                fallback.core.subscribe(queue, consumer, exclusive)
            return fallback.core

    # -- queue operations ----------------------------------------------------

    def subscribe(self, queue, consumer_id=None, exclusive=False):
        consumer = consumer_id or self.agent_id
        while True:
            core = self._core()
            try:
                core.subscribe(queue, consumer, exclusive)
                break
            except BrokerClosed:
                continue
        with self._lock:
            self._subs[(queue, consumer)] = exclusive

    def unsubscribe(self, queue, consumer_id=None):
        consumer = consumer_id or self.agent_id
        with self._lock:
            self._subs.pop((queue, consumer), None)
            self._outstanding.pop((queue, consumer), None)
        try:
            self._core().unsubscribe(queue, consumer)
        except (BrokerClosed, AllBrokersDown):
            pass

    def send(self, queue, envelope):
        body = encode_frame(envelope, self.key, self.max_frame)
        while True:
            core = self._core()
            try:
                core.publish(queue, body)
                return
            except BrokerClosed:
                continue

    def receive(self, queue, consumer_id=None, timeout_ms=1000):
        consumer = consumer_id or self.agent_id
        deadline = time.monotonic() + timeout_ms / 1000.0
        while True:
            remaining_ms = (deadline - time.monotonic()) * 1000.0
            if remaining_ms <= 0:
                return None
            core = self._core()
            try:
                got = core.fetch(queue, consumer, remaining_ms)
            except BrokerClosed:
                continue
            if got is None:
                return None
            delivery_id, body = got
            try:
                envelope = decode_frame(body, self.key)
            except (MacMismatch, MalformedFrame) as err:
                self.insecure_rejected += 1
                if self.on_insecure is not None:
                    self.on_insecure(str(err))
                core.ack(queue, consumer, delivery_id)  # drop the poison frame
                continue
            with self._lock:
                pending = self._outstanding.setdefault((queue, consumer), deque())
                pending.append((delivery_id, envelope.signature))
            return envelope

    def ack(self, queue, consumer_id, envelope):
        consumer = consumer_id or self.agent_id
        delivery_id = None
        with self._lock:
            pending = self._outstanding.get((queue, consumer))
            if pending:
                for i, (did, sig) in enumerate(pending):
                    if sig == envelope.signature:
                        delivery_id = did
                        del pending[i]
                        break
        if delivery_id is None:
            return
        try:
            self._core().ack(queue, consumer, delivery_id)
        except (BrokerClosed, AllBrokersDown):
            pass

    def failover_probe(self) -> str:
        try:
            self._core()
        except AllBrokersDown:
            pass
        return self._binding

    def close(self):
        with self._lock:
            consumers = {consumer for _, consumer in self._subs}
            self._subs.clear()
            self._outstanding.clear()
        try:
            core = self._core()
        except AllBrokersDown:
            return
        for consumer in consumers:
            try:
                core.drop_consumer(consumer)
            except BrokerClosed:
                return
