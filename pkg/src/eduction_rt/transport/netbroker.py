"""Standalone TCP message broker.

Runs as its own process (`python3 -m eduction_rt.transport.netbroker`) or
embedded in-process for tests via `BrokerServer`. The broker holds no
instance key: it parses only CONTROL payloads, and the DEMAND/RESULT frames
riding inside "send" and "deliver" controls stay opaque bytes end to end.

Session control ops (TLV payloads on CONTROL frames):

    client -> broker   sub    queue, consumer, mode, seq     replied ok/err
                       unsub  queue, consumer, seq           replied ok
                       send   queue, frame, seq              replied ok/err
                       ack    queue, consumer, delivery id   no reply
                       hb     seq                            replied ok
    broker -> client   deliver queue, consumer, delivery id, frame
                       ok     seq
                       err    seq, error name, detail

The T_DELIVERY field carries the client's request sequence number on
sub/unsub/send/hb/ok/err and the broker's delivery id on ack/deliver.
Dropping a connection returns everything its consumers held to the queue
backlogs, which is what redelivers unacked envelopes to the survivors.
"""
from __future__ import annotations

import argparse
import signal
import socketserver
import subprocess
import sys
import threading
import time
from collections import deque
from typing import Optional

from ..logutil import TimestampedLog
from .core import BrokerClosed, BrokerCore, ExclusiveConflict
from .envelope import (
    DEFAULT_MAX_FRAME,
    HEADER_LEN,
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
    control_envelope,
    decode_frame,
    decode_tlv,
    encode_frame,
)
from .wireio import read_frame_body, write_frame

_PUMP_SLICE_MS = 100  # writer re-snapshot interval; bounds sub-to-delivery lag


class _Connection:
    """One client socket: a reader thread (this) plus a delivery pump."""

    def __init__(self, sock, server: "BrokerServer"):
        self.sock = sock
        self.server = server
        self.consumer_ids: set[str] = set()
        self._ids_lock = threading.Lock()
        self._wlock = threading.Lock()
        self._open = True

    def run(self) -> None:
        pump = threading.Thread(target=self._pump_deliveries, daemon=True)
        pump.start()
        try:
            while True:
                body = read_frame_body(self.sock, self.server.max_body)
                if body is None:
                    break
                self._handle(body)
        finally:
            self._open = False
            with self._ids_lock:
                dropped = set(self.consumer_ids)
            for consumer_id in dropped:
                self.server.core.drop_consumer(consumer_id)
            try:
                self.sock.close()
            except OSError:
                pass
            self.server.log_line("connection closed, dropped consumers: %s" % (sorted(dropped),))

    def _handle(self, body: bytes) -> None:
        try:
            envelope = decode_frame(body)  # no key: broker never verifies MACs
            if envelope.kind is not EnvelopeKind.CONTROL:
                return
            fields = decode_tlv(envelope.payload)
        except MalformedFrame:
            return
        op = fields.get(T_OP)
        seq = fields.get(T_DELIVERY, 0)
        core = self.server.core
        if op == "sub":
            queue, consumer = fields.get(T_QUEUE), fields.get(T_CONSUMER)
            exclusive = fields.get(T_MODE) == "exclusive"
            try:
                core.subscribe(queue, consumer, exclusive)
            except ExclusiveConflict as err:
                self._reply_err(seq, "ExclusiveConflict", str(err))
                return
            with self._ids_lock:
                self.consumer_ids.add(consumer)
            self._reply_ok(seq)
        elif op == "unsub":
            core.unsubscribe(fields.get(T_QUEUE), fields.get(T_CONSUMER))
            self._reply_ok(seq)
        elif op == "send":
            frame = fields.get(T_FRAME, b"")
            if len(frame) > self.server.max_frame + HEADER_LEN:
                self._reply_err(seq, "FrameTooLarge", f"{len(frame)} bytes")
                return
            core.publish(fields.get(T_QUEUE), frame)
            self._reply_ok(seq)
        elif op == "ack":
            core.ack(fields.get(T_QUEUE), fields.get(T_CONSUMER), seq)
        elif op == "hb":
            self._reply_ok(seq)

    def _reply_ok(self, seq: int) -> None:
        self._write_control({T_OP: "ok", T_DELIVERY: seq})

    def _reply_err(self, seq: int, name: str, detail: str) -> None:
        self._write_control({T_OP: "err", T_DELIVERY: seq, T_ERROR: name, T_DETAIL: detail})

    def _write_control(self, fields: dict) -> None:
        body = encode_frame(control_envelope(fields), key=None)
        try:
            write_frame(self.sock, body, self._wlock)
        except OSError:
            self._open = False

    def _pump_deliveries(self) -> None:
        """Push assigned frames to this connection's consumers as they appear.

        Re-snapshots the consumer set every slice so subscriptions made after
        the pump started are picked up; a fresh assignment wakes the fetch
        immediately when the set already contains its consumer.
        """
        core = self.server.core
        while self._open and core.alive:
            with self._ids_lock:
                ids = set(self.consumer_ids)
            if not ids:
                time.sleep(_PUMP_SLICE_MS / 1000.0)
                continue
            try:
                got = core.fetch_any_of(ids, _PUMP_SLICE_MS)
            except BrokerClosed:
                break
            if got is None:
                continue
            queue, consumer, delivery_id, frame = got
            self._write_control(
                {
                    T_OP: "deliver",
                    T_QUEUE: queue,
                    T_CONSUMER: consumer,
                    T_DELIVERY: delivery_id,
                    T_FRAME: frame,
                }
            )


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        _Connection(self.request, self.server.owner).run()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    owner: "BrokerServer"


class BrokerServer:
    """TCP broker front end over a BrokerCore."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        name: str = "broker",
        max_frame: int = DEFAULT_MAX_FRAME,
        log: Optional[TimestampedLog] = None,
    ):
        self.core = BrokerCore(name)
        self.name = name
        self.max_frame = max_frame
        self.max_body = max_frame + HEADER_LEN * 2 + 4096  # control overhead slack
        self._log = log
        self._server = _Server((host, port), _Handler)
        self._server.owner = self
        self.host, self.port = self._server.server_address[:2]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def log_line(self, message: str) -> None:
        if self._log is not None:
            self._log.write(f"{self.name}: {message}")

    def start(self) -> "BrokerServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.log_line(f"broker {self.name} listening on {self.host}:{self.port}")
        return self

    def stop(self) -> None:
        self.core.close()
        self._server.shutdown()
        self._server.server_close()


class BrokerProcess:
    """The broker as a child process, for failover and crash tests.

    Waits for the readiness line on stdout to learn the bound port, then
    keeps draining output so the child never blocks on a full pipe.
    """

    def __init__(self, name: str = "broker", host: str = "127.0.0.1", port: int = 0,
                 startup_timeout: float = 15.0):
        self.name = name
        self.lines: deque = deque(maxlen=1000)
        self.proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "eduction_rt.transport.netbroker",
                "--host",
                host,
                "--port",
                str(port),
                "--name",
                name,
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        self.host = host
        self.port = 0
        deadline = time.monotonic() + startup_timeout
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if not line:
                if self.proc.poll() is not None:
                    raise RuntimeError(
                        f"broker process exited with {self.proc.returncode}: "
                        + "\n".join(self.lines)
                    )
                time.sleep(0.01)
                continue
            self.lines.append(line.rstrip())
            marker = " listening on "
            if marker in line:
                hostport = line.rsplit(marker, 1)[1].strip()
                self.host, _, port_text = hostport.rpartition(":")
                self.port = int(port_text)
                break
        else:
            self.kill()
            raise RuntimeError("broker process never reported its address")
        self._drain = threading.Thread(target=self._pump_output, daemon=True)
        self._drain.start()

    def _pump_output(self) -> None:
        for line in self.proc.stdout:
            self.lines.append(line.rstrip())

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None

    def kill(self) -> None:
        """Hard kill, as a crash; no orderly shutdown of queue state."""
        if self.alive:
            self.proc.kill()
        self.proc.wait()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eduction-broker", description="standalone TCP message broker"
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0, help="0 picks a free port")
    parser.add_argument("--name", default="broker")
    parser.add_argument("--max-frame", type=int, default=DEFAULT_MAX_FRAME)
    parser.add_argument("--log-file", default=None)
    args = parser.parse_args(argv)

    log = TimestampedLog(path=args.log_file)
    server = BrokerServer(
        host=args.host, port=args.port, name=args.name, max_frame=args.max_frame, log=log
    )
    server.start()

    done = threading.Event()
    for signum in (signal.SIGTERM, signal.SIGINT):
        signal.signal(signum, lambda *_: done.set())
    done.wait()
    server.stop()
    log.write(f"broker {args.name} stopped")
    return 0


if __name__ == "__main__":
    sys.exit(main())
