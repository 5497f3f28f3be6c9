"""TCP transport agent with primary/secondary broker failover.

One socket per agent. A reader thread turns broker "deliver" controls into
per-(queue, consumer) inboxes and resolves request slots when "ok"/"err"
confirmations arrive. Liveness comes from two directions: the reader sees
EOF the moment a broker process dies with the socket open, and a heartbeat
thread declares the connection dead when nothing has been heard for two
beats. Either way the socket is torn down and the next operation reconnects,
preferring the currently bound broker and falling over to the other one;
every reconnect re-registers the agent's subscriptions and bumps
``failover_count`` so in-flight ``sync_call`` requests get resent.

Requests awaiting confirmation are owned by their calling thread: the call
rewrites its control frame on every new connection generation until the
confirmation lands or the deadline passes. Nothing else journals sends, so
an envelope confirmed by a broker that later dies is gone as far as the
transport is concerned; redundancy against that sits in the demand store,
not here.
"""
from __future__ import annotations

import itertools
import socket
import threading
import time
from collections import deque
from typing import Callable, Mapping, Optional

from .agent import (
    KEY_PRIMARY,
    KEY_SECONDARY,
    AllBrokersDown,
    MissingProperty,
    Timeout,
    TransportAgent,
)
from .core import ExclusiveConflict, NotSubscribed
from .envelope import (
    HEADER_LEN,
    MacMismatch,
    MalformedFrame,
    EnvelopeKind,
    T_CONSUMER,
    T_DELIVERY,
    T_DETAIL,
    T_ERROR,
    T_FRAME,
    T_MODE,
    T_OP,
    T_QUEUE,
    TransportError,
    control_envelope,
    decode_frame,
    decode_tlv,
    encode_frame,
)
from .wireio import parse_hostport, read_frame_body, write_frame


class _ReqSlot:
    __slots__ = ("event", "failure")

    def __init__(self):
        self.event = threading.Event()
        self.failure: Optional[tuple[str, str]] = None  # (error name, detail)

    def resolve(self, failure=None):
        self.failure = failure
        self.event.set()


class TcpBrokerAgent(TransportAgent):
    CONNECT_TIMEOUT = 2.0

    def __init__(self, config: Mapping[str, str], agent_id: Optional[str] = None):
        super().__init__(config, agent_id)
        primary = self.properties.get(KEY_PRIMARY)
        if not primary:
            raise MissingProperty(KEY_PRIMARY)
        self._addresses = {"primary": primary, "secondary": self.properties.get(KEY_SECONDARY)}
        self._binding = "primary"
        self._cv = threading.Condition()
        self._wlock = threading.Lock()
        self._sock: Optional[socket.socket] = None
        self._conn_gen = 0
        self._closed = False
        self._last_rx = 0.0
        self._seq = itertools.count(1)
        self._slots: dict[int, _ReqSlot] = {}
        self._subs: dict[tuple[str, str], bool] = {}
        self._inbox: dict[tuple[str, str], deque] = {}  # (delivery_id, frame body)
        self._outstanding: dict[tuple[str, str], deque] = {}  # (delivery_id, signature)
        self._hb_thread: Optional[threading.Thread] = None
        self._max_body = self.max_frame + 2 * HEADER_LEN + 8192
        self._op_timeout_s = max(5.0, 10 * self.heartbeat_ms / 1000.0)

    # -- connection lifecycle ---------------------------------------------

    def _ensure_connected(self) -> None:
        with self._cv:
            self._ensure_connected_locked()

    def _ensure_connected_locked(self) -> None:
        if self._closed:
            raise TransportError("transport agent is closed")
        if self._sock is not None:
            return
        other = "secondary" if self._binding == "primary" else "primary"
        for which in (self._binding, other):
            address = self._addresses.get(which)
            if not address:
                continue
            try:
                sock = socket.create_connection(
                    parse_hostport(address), timeout=self.CONNECT_TIMEOUT
                )
            except OSError:
                continue
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conn_gen += 1
            gen = self._conn_gen
            self._sock = sock
            self._last_rx = time.monotonic()
            self._binding = which
            if gen > 1:
                # reattachment: broker-side session state is gone, so pending
                # sync_call requests must resend
                self.failover_count += 1
            threading.Thread(target=self._read_loop, args=(gen, sock), daemon=True).start()
            if self._hb_thread is None:
                self._hb_thread = threading.Thread(target=self._heartbeat_loop, daemon=True)
                self._hb_thread.start()
            try:
                for (queue, consumer), exclusive in self._subs.items():
                    self._write_control(
                        sock,
                        {
                            T_OP: "sub",
                            T_QUEUE: queue,
                            T_CONSUMER: consumer,
                            T_MODE: "exclusive" if exclusive else "shared",
                            T_DELIVERY: 0,
                        },
                    )
            except OSError:
                self._conn_lost_locked(gen, sock)
                continue
            return
        raise AllBrokersDown(self._addresses["primary"], self._addresses.get("secondary"))

    def _conn_lost(self, gen: int, sock: socket.socket) -> None:
        with self._cv:
            self._conn_lost_locked(gen, sock)

    def _conn_lost_locked(self, gen: int, sock: socket.socket) -> None:
        if gen != self._conn_gen or self._closed:
            return  # a newer connection already took over
        self._sock = None
        try:
            sock.close()
        except OSError:
            pass
        self._cv.notify_all()

    def _write_control(self, sock: socket.socket, fields: dict) -> None:
        body = encode_frame(control_envelope(fields), key=None)
        write_frame(sock, body, self._wlock)

    # -- background threads --------------------------------------------------

    def _read_loop(self, gen: int, sock: socket.socket) -> None:
        while True:
            body = read_frame_body(sock, self._max_body)
            if body is None:
                break
            with self._cv:
                self._last_rx = time.monotonic()
            try:
                envelope = decode_frame(body)
                if envelope.kind is not EnvelopeKind.CONTROL:
                    continue
                fields = decode_tlv(envelope.payload)
            except MalformedFrame:
                continue
            op = fields.get(T_OP)
            if op == "deliver":
                key = (fields.get(T_QUEUE), fields.get(T_CONSUMER))
                with self._cv:
                    if key in self._subs:
                        self._inbox.setdefault(key, deque()).append(
                            (fields.get(T_DELIVERY, 0), fields.get(T_FRAME, b""))
                        )
                        self._cv.notify_all()
            elif op in ("ok", "err"):
                with self._cv:
                    slot = self._slots.get(fields.get(T_DELIVERY, 0))
                if slot is not None:
                    failure = None
                    if op == "err":
                        failure = (fields.get(T_ERROR, ""), fields.get(T_DETAIL, ""))
                    slot.resolve(failure)
        self._conn_lost(gen, sock)

    def _heartbeat_loop(self) -> None:
        interval = self.heartbeat_ms / 1000.0
        while True:
            time.sleep(interval)
            with self._cv:
                if self._closed:
                    return
                sock, gen, last = self._sock, self._conn_gen, self._last_rx
            if sock is None:
                continue
            if time.monotonic() - last > 2.5 * interval:  # two beats missed
                self._conn_lost(gen, sock)
                continue
            try:
                self._write_control(sock, {T_OP: "hb", T_DELIVERY: next(self._seq)})
            except OSError:
                self._conn_lost(gen, sock)

    # -- confirmed requests ---------------------------------------------------

    def _roundtrip(
        self,
        make_fields: Callable[[int], dict],
        error_mapper: Optional[Callable[[str, str], TransportError]] = None,
    ) -> None:
        """Write a control request and block for ok/err, resending on each
        new connection generation until the deadline."""
        seq = next(self._seq)
        slot = _ReqSlot()
        with self._cv:
            self._slots[seq] = slot
        written_gen = -1
        deadline = time.monotonic() + self._op_timeout_s
        try:
            while True:
                self._ensure_connected()
                with self._cv:
                    gen, sock = self._conn_gen, self._sock
                if sock is not None and gen != written_gen:
                    try:
                        self._write_control(sock, make_fields(seq))
                        written_gen = gen
                    except OSError:
                        self._conn_lost(gen, sock)
                        continue
                if slot.event.wait(0.05):
                    if slot.failure is not None:
                        name, detail = slot.failure
                        if error_mapper is not None:
                            raise error_mapper(name, detail)
                        raise TransportError(f"broker rejected request: {name}: {detail}")
                    return
                if time.monotonic() >= deadline:
                    raise Timeout(f"no broker confirmation within {self._op_timeout_s:.1f} s")
        finally:
            with self._cv:
                self._slots.pop(seq, None)

    # -- queue operations ----------------------------------------------------

    def subscribe(self, queue, consumer_id=None, exclusive=False):
        consumer = consumer_id or self.agent_id
        mode = "exclusive" if exclusive else "shared"

        def fields(seq):
            return {
                T_OP: "sub",
                T_QUEUE: queue,
                T_CONSUMER: consumer,
                T_MODE: mode,
                T_DELIVERY: seq,
            }

        def mapper(name, detail):
            if name == "ExclusiveConflict":
                return ExclusiveConflict(queue)
            return TransportError(f"{name}: {detail}")

        self._roundtrip(fields, mapper)
        with self._cv:
            self._subs[(queue, consumer)] = exclusive
            self._inbox.setdefault((queue, consumer), deque())

    def unsubscribe(self, queue, consumer_id=None):
        consumer = consumer_id or self.agent_id
        with self._cv:
            self._subs.pop((queue, consumer), None)
            self._inbox.pop((queue, consumer), None)
            self._outstanding.pop((queue, consumer), None)
        try:
            self._roundtrip(
                lambda seq: {
                    T_OP: "unsub",
                    T_QUEUE: queue,
                    T_CONSUMER: consumer,
                    T_DELIVERY: seq,
                }
            )
        except (AllBrokersDown, Timeout):
            pass  # local forget is what matters; a dead broker forgot already

    def send(self, queue, envelope):
        body = encode_frame(envelope, self.key, self.max_frame)
        self._roundtrip(
            lambda seq: {T_OP: "send", T_QUEUE: queue, T_FRAME: body, T_DELIVERY: seq}
        )

    def receive(self, queue, consumer_id=None, timeout_ms=1000):
        consumer = consumer_id or self.agent_id
        key = (queue, consumer)
        deadline = time.monotonic() + timeout_ms / 1000.0
        while True:
            self._ensure_connected()
            with self._cv:
                if key not in self._subs:
                    raise NotSubscribed(queue, consumer)
                box = self._inbox.get(key)
                if box:
                    delivery_id, frame = box.popleft()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._cv.wait(min(remaining, 0.1))
                    continue
            try:
                envelope = decode_frame(frame, self.key)
            except (MacMismatch, MalformedFrame) as err:
                self.insecure_rejected += 1
                if self.on_insecure is not None:
                    self.on_insecure(str(err))
                self._ack_delivery(queue, consumer, delivery_id)  # drop poison
                continue
            with self._cv:
                self._outstanding.setdefault(key, deque()).append(
                    (delivery_id, envelope.signature)
                )
            return envelope

    def ack(self, queue, consumer_id, envelope):
        consumer = consumer_id or self.agent_id
        delivery_id = None
        with self._cv:
            pending = self._outstanding.get((queue, consumer))
            if pending:
                for i, (did, sig) in enumerate(pending):
                    if sig == envelope.signature:
                        delivery_id = did
                        del pending[i]
                        break
        if delivery_id is not None:
            self._ack_delivery(queue, consumer, delivery_id)

    def _ack_delivery(self, queue: str, consumer: str, delivery_id: int) -> None:
        """Fire-and-forget; a lost ack just means a redelivery later."""
        with self._cv:
            sock, gen = self._sock, self._conn_gen
        if sock is None:
            return
        try:
            self._write_control(
                sock,
                {T_OP: "ack", T_QUEUE: queue, T_CONSUMER: consumer, T_DELIVERY: delivery_id},
            )
        except OSError:
            self._conn_lost(gen, sock)

    def failover_probe(self) -> str:
        try:
            self._ensure_connected()
        except AllBrokersDown:
            pass
        return self._binding

    def close(self):
        with self._cv:
            self._closed = True
            sock = self._sock
            self._sock = None
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
            self._cv.notify_all()
