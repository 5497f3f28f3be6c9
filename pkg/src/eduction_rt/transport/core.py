"""Queue engine shared by the in-process broker and the TCP broker.

The broker never interprets data frames: whatever byte string arrives on
``publish`` is what a consumer gets back from ``fetch``. Envelopes are
assigned at publish time by strict rotation over the subscriber list, so
with k consumers and m envelopes every consumer is assigned within one of
m/k, no matter how quickly individual consumers drain their share. Each
envelope lives in exactly one place: the queue backlog, a consumer's
mailbox (assigned, not yet fetched), or a consumer's unacked map (fetched,
not yet acked). A consumer that unsubscribes or vanishes returns everything
it held to the front of the backlog in original delivery order, and the
remaining consumers pick it up.

Queue names starting with "_" are transient: publishing with no consumers
drops the envelope instead of parking it, and the queue state disappears
when the last consumer leaves. Reply queues and completion-event queues use
this so short-lived subscribers never leak state into the broker.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .envelope import TransportError

TRANSIENT_PREFIX = "_"


class ExclusiveConflict(TransportError):
    """Second consumer tried to attach to a queue held in exclusive mode."""

    def __init__(self, queue: str):
        super().__init__(f"queue {queue!r} already has an exclusive consumer")
        self.queue = queue


class NotSubscribed(TransportError):
    def __init__(self, queue: str, consumer_id: str):
        super().__init__(f"consumer {consumer_id!r} is not subscribed to queue {queue!r}")
        self.queue = queue
        self.consumer_id = consumer_id


class BrokerClosed(TransportError):
    """The broker was shut down (or killed) and accepts no further requests."""

    def __init__(self, name: str):
        super().__init__(f"broker {name!r} is closed")
        self.name = name


@dataclass
class _Consumer:
    consumer_id: str
    mailbox: deque = field(default_factory=deque)  # (delivery_id, frame)
    unacked: dict = field(default_factory=dict)  # delivery_id -> frame


class _Queue:
    __slots__ = ("name", "exclusive", "order", "consumers", "backlog", "rr")

    def __init__(self, name: str):
        self.name = name
        self.exclusive = False
        self.order: list[str] = []  # rotation order, first subscriber first
        self.consumers: dict[str, _Consumer] = {}
        self.backlog: deque = deque()  # (delivery_id, frame)
        self.rr = 0

    @property
    def transient(self) -> bool:
        return self.name.startswith(TRANSIENT_PREFIX)

    def assign(self) -> None:
        while self.backlog and self.order:
            target = self.consumers[self.order[self.rr % len(self.order)]]
            self.rr += 1
            target.mailbox.append(self.backlog.popleft())

    def reclaim(self, consumer: _Consumer) -> None:
        held = list(consumer.mailbox) + list(consumer.unacked.items())
        held.sort(key=lambda item: item[0])
        consumer.mailbox.clear()
        consumer.unacked.clear()
        self.backlog.extendleft(reversed(held))


class BrokerCore:
    """Thread-safe queue state; one instance per broker."""

    def __init__(self, name: str = "broker"):
        self.name = name
        self._cv = threading.Condition()
        self._queues: dict[str, _Queue] = {}
        self._next_delivery = 1
        self._closed = False
        self.published_total = 0
        self.dropped_total = 0

    @property
    def alive(self) -> bool:
        return not self._closed

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def _check_open(self) -> None:
        if self._closed:
            raise BrokerClosed(self.name)

    # -- subscription management ---------------------------------------

    def subscribe(self, queue: str, consumer_id: str, exclusive: bool = False) -> None:
        with self._cv:
            self._check_open()
            q = self._queues.get(queue)
            if q is None:
                q = self._queues[queue] = _Queue(queue)
            if consumer_id in q.consumers:
                return  # resubscribe keeps the rotation position
            if q.consumers and (exclusive or q.exclusive):
                raise ExclusiveConflict(queue)
            if not q.consumers:
                q.exclusive = exclusive
            q.consumers[consumer_id] = _Consumer(consumer_id)
            q.order.append(consumer_id)
            q.assign()
            self._cv.notify_all()

    def unsubscribe(self, queue: str, consumer_id: str) -> None:
        with self._cv:
            q = self._queues.get(queue)
            if q is None or consumer_id not in q.consumers:
                return
            self._detach(q, consumer_id)
            self._cv.notify_all()

    def drop_consumer(self, consumer_id: str) -> None:
        """Forget a consumer everywhere, requeueing whatever it held."""
        with self._cv:
            for q in list(self._queues.values()):
                if consumer_id in q.consumers:
                    self._detach(q, consumer_id)
            self._cv.notify_all()

    def _detach(self, q: _Queue, consumer_id: str) -> None:
        consumer = q.consumers.pop(consumer_id)
        q.order.remove(consumer_id)
        q.reclaim(consumer)
        if not q.consumers:
            q.exclusive = False  # mode belongs to the current subscriber set
            if q.transient:
                self.dropped_total += len(q.backlog)
                del self._queues[q.name]
        else:
            q.assign()

    # -- publish / fetch / ack -------------------------------------------

    def publish(self, queue: str, frame: bytes) -> Optional[int]:
        """Enqueue a frame; returns its delivery id, or None if dropped.

        Only transient queues drop: a durable queue with no consumers parks
        the frame in its backlog until somebody subscribes.
        """
        with self._cv:
            self._check_open()
            q = self._queues.get(queue)
            if queue.startswith(TRANSIENT_PREFIX) and (q is None or not q.consumers):
                self.dropped_total += 1
                return None
            if q is None:
                q = self._queues[queue] = _Queue(queue)
            delivery_id = self._next_delivery
            self._next_delivery += 1
            q.backlog.append((delivery_id, frame))
            self.published_total += 1
            q.assign()
            self._cv.notify_all()
            return delivery_id

    def fetch(self, queue: str, consumer_id: str, timeout_ms: float) -> Optional[tuple[int, bytes]]:
        """Blocking pop of the consumer's next assigned frame on one queue."""
        deadline = time.monotonic() + max(timeout_ms, 0) / 1000.0
        with self._cv:
            while True:
                self._check_open()
                q = self._queues.get(queue)
                consumer = q.consumers.get(consumer_id) if q else None
                if consumer is None:
                    raise NotSubscribed(queue, consumer_id)
                if consumer.mailbox:
                    delivery_id, frame = consumer.mailbox.popleft()
                    consumer.unacked[delivery_id] = frame
                    return delivery_id, frame
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cv.wait(remaining)

    def fetch_any_of(
        self, consumer_ids: Iterable[str], timeout_ms: float
    ) -> Optional[tuple[str, str, int, bytes]]:
        """Pop the oldest assigned frame across any of the given consumers.

        Returns (queue, consumer_id, delivery_id, frame). Delivery ids are
        broker-global, so "oldest" means arrival order across queues.
        """
        ids = set(consumer_ids)
        deadline = time.monotonic() + max(timeout_ms, 0) / 1000.0
        with self._cv:
            while True:
                self._check_open()
                best = None
                for q in self._queues.values():
                    for cid in ids:
                        consumer = q.consumers.get(cid)
                        if consumer and consumer.mailbox:
                            delivery_id, frame = consumer.mailbox[0]
                            if best is None or delivery_id < best[2]:
                                best = (q, consumer, delivery_id, frame)
                if best is not None:
                    q, consumer, delivery_id, frame = best
                    consumer.mailbox.popleft()
                    consumer.unacked[delivery_id] = frame
                    return q.name, consumer.consumer_id, delivery_id, frame
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cv.wait(remaining)

    def ack(self, queue: str, consumer_id: str, delivery_id: int) -> bool:
        with self._cv:
            q = self._queues.get(queue)
            consumer = q.consumers.get(consumer_id) if q else None
            if consumer is None:
                return False
            return consumer.unacked.pop(delivery_id, None) is not None

    # -- introspection ----------------------------------------------------

    def queue_stats(self) -> list[dict]:
        with self._cv:
            out = []
            for q in self._queues.values():
                out.append(
                    {
                        "name": q.name,
                        "mode": "exclusive" if q.exclusive else "shared",
                        "consumers": list(q.order),
                        "backlog": len(q.backlog),
                        "assigned": sum(len(c.mailbox) for c in q.consumers.values()),
                        "unacked": sum(len(c.unacked) for c in q.consumers.values()),
                    }
                )
            return out
