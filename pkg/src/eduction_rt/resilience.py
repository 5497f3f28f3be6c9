"""Self-management: journal recovery, healing, protection, optimization.

Four loosely coupled pieces. The write-ahead log gives pipeline clients
crash recovery (begin a transaction before work, commit after; whatever
never committed gets replayed). The healing supervisor watches node-down
events and promotes warm standbys so every stage keeps its minimum number
of routes. The protection check is the admission decision for incoming
frames, a keyed-hash recomputation with an event trail. The transport
selector and training-set replicator cover measurement-driven optimization.
"""

from __future__ import annotations

import hashlib
import os
import statistics
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from .logutil import now_ms
from .pipeline import DUMP_BINARY, TrainingSet, dump_bytes
from .transport import MacMismatch, MalformedFrame, TransportEnvelope, decode_frame


class ResilienceError(Exception):
    pass


class WalError(ResilienceError):
    pass


class WalFull(WalError):
    pass


class UnknownTxn(WalError):
    pass


class DoubleCommit(WalError):
    pass


class CorruptLog(WalError):
    """Damage that is not a torn tail; the log cannot be trusted."""


class NoStandbyAvailable(ResilienceError):
    def __init__(self, stage: str, actions: list[tuple[str, str]]):
        self.stage = stage
        self.actions = actions  # promotions that did succeed before the shortfall
        super().__init__(f"stage {stage!r} is below min_routes with no standby left")


class NoProbes(ResilienceError):
    pass


class ReplicationIncomplete(ResilienceError):
    def __init__(self, failed: Mapping[str, str], report: "ReplicationReport"):
        self.failed = dict(failed)
        self.report = report
        super().__init__(f"replication failed for {sorted(failed)}")


# -- write-ahead log ---------------------------------------------------------------

class WalStatus(Enum):
    BEGUN = 0x01
    COMMITTED = 0x02


@dataclass(frozen=True)
class WalRecord:
    txn_id: int
    timestamp: int
    stage: str
    payload_digest: bytes
    status: WalStatus


_WAL_MAGIC = b"DWAL"
_WAL_VERSION = 0x01
_WAL_HEADER = _WAL_MAGIC + bytes([_WAL_VERSION])
_DIGEST_LEN = 32
# txn u64 | timestamp i64 | status u8 | stage length u32, then stage + digest
_FIXED_BODY = 8 + 8 + 1 + 4


def _encode_record(record: WalRecord) -> bytes:
    stage = record.stage.encode("utf-8")
    body = struct.pack(
        ">QqBI", record.txn_id, record.timestamp, record.status.value, len(stage)
    )
    body += stage + record.payload_digest
    return struct.pack(">I", len(body) + 4) + body + struct.pack(">I", zlib.crc32(body))


def _decode_record(body: bytes) -> WalRecord:
    txn, ts, status, stage_len = struct.unpack(">QqBI", body[:_FIXED_BODY])
    if len(body) != _FIXED_BODY + stage_len + _DIGEST_LEN:
        raise CorruptLog(f"record length lies: {len(body)} bytes")
    stage = body[_FIXED_BODY : _FIXED_BODY + stage_len].decode("utf-8", "replace")
    digest = body[_FIXED_BODY + stage_len :]
    try:
        return WalRecord(txn, ts, stage, digest, WalStatus(status))
    except ValueError:
        raise CorruptLog(f"unknown record status 0x{status:02x}") from None


class WalLog:
    """Append-only transaction journal with flush-before-return durability.

    Records are length-prefixed with a trailing per-record checksum. A torn
    final record (a crash mid-append) is truncated away on open; checksum
    failures anywhere else raise CorruptLog. At most `max_entries` begun
    transactions may be outstanding at once.
    """

    def __init__(self, path, max_entries: int = 1000):
        self.path = os.fspath(path)
        self.max_entries = max_entries
        self._lock = threading.Lock()
        self._open: dict[int, WalRecord] = {}
        self._last_txn = 0
        self._scan()
        self._fh = open(self.path, "ab")

    def _scan(self) -> None:
        if not os.path.exists(self.path):
            with open(self.path, "wb") as fh:
                fh.write(_WAL_HEADER)
                fh.flush()
                os.fsync(fh.fileno())
            return
        with open(self.path, "rb") as fh:
            data = fh.read()
        if len(data) < len(_WAL_HEADER):
            # crashed while writing the very first bytes
            if _WAL_HEADER.startswith(data):
                self._rewrite(b"")
                return
            raise CorruptLog("unrecognized header")
        if data[: len(_WAL_HEADER)] != _WAL_HEADER:
            raise CorruptLog("unrecognized header")

        offset = len(_WAL_HEADER)
        good_end = offset
        torn = False
        while offset < len(data):
            if offset + 4 > len(data):
                torn = True
                break
            (length,) = struct.unpack(">I", data[offset : offset + 4])
            if offset + 4 + length > len(data):
                torn = True
                break
            chunk = data[offset + 4 : offset + 4 + length]
            if length < _FIXED_BODY + _DIGEST_LEN + 4:
                raise CorruptLog(f"impossible record length {length}")
            body, crc = chunk[:-4], struct.unpack(">I", chunk[-4:])[0]
            if zlib.crc32(body) != crc:
                raise CorruptLog(f"checksum mismatch at byte {offset}")
            self._apply(_decode_record(body), offset)
            offset += 4 + length
            good_end = offset
        if torn:
            self._rewrite(data[len(_WAL_HEADER) : good_end])

    def _apply(self, record: WalRecord, offset: int) -> None:
        if record.status is WalStatus.BEGUN:
            if record.txn_id <= self._last_txn:
                raise CorruptLog(f"txn {record.txn_id} out of order at byte {offset}")
            self._last_txn = record.txn_id
            self._open[record.txn_id] = record
        else:
            if record.txn_id > self._last_txn:
                raise CorruptLog(f"commit of unknown txn {record.txn_id} at byte {offset}")
            self._open.pop(record.txn_id, None)

    def _rewrite(self, records_blob: bytes) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(_WAL_HEADER + records_blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def _append(self, record: WalRecord) -> None:
        self._fh.write(_encode_record(record))
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def begin(self, stage: str, payload_digest: bytes) -> int:
        if len(payload_digest) != _DIGEST_LEN:
            raise ValueError(f"payload digest must be {_DIGEST_LEN} bytes")
        with self._lock:
            if len(self._open) >= self.max_entries:
                raise WalFull(f"{self.max_entries} transactions already outstanding")
            txn = self._last_txn + 1
            record = WalRecord(txn, now_ms(), stage, payload_digest, WalStatus.BEGUN)
            self._append(record)
            self._last_txn = txn
            self._open[txn] = record
            return txn

    def commit(self, txn_id: int) -> None:
        with self._lock:
            if txn_id > self._last_txn or txn_id < 1:
                raise UnknownTxn(str(txn_id))
            begun = self._open.get(txn_id)
            if begun is None:
                raise DoubleCommit(str(txn_id))
            self._append(
                WalRecord(
                    txn_id, now_ms(), begun.stage, begun.payload_digest, WalStatus.COMMITTED
                )
            )
            del self._open[txn_id]

    def recover(self) -> list[WalRecord]:
        """Begun-without-committed records, oldest first."""
        with self._lock:
            return [self._open[txn] for txn in sorted(self._open)]

    def uncommitted_count(self) -> int:
        with self._lock:
            return len(self._open)

    def compact(self) -> None:
        """Drop committed pairs from the file, keeping open transactions."""
        with self._lock:
            blob = b"".join(_encode_record(self._open[t]) for t in sorted(self._open))
            self._fh.close()
            self._rewrite(blob)
            self._fh = open(self.path, "ab")

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "WalLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- self-healing -------------------------------------------------------------------

@dataclass
class StageRoutes:
    active: set[str]
    standbys: list[str]
    min_routes: int = 1

    def __post_init__(self):
        if self.min_routes < 1:
            raise ValueError("min_routes must be >= 1")


@dataclass
class ReplicaPlan:
    stages: dict[str, StageRoutes] = field(default_factory=dict)

    def known(self, worker: str) -> bool:
        return any(
            worker in r.active or worker in r.standbys for r in self.stages.values()
        )


def heal(plan: ReplicaPlan, down: str) -> list[tuple[str, str]]:
    """Remove `down` everywhere; promote standbys until min_routes holds.

    Returns (stage, promoted) pairs. If some stage cannot be repaired the
    shortfall is raised after all other promotions, with the completed
    actions attached for the caller to apply anyway.
    """
    if not plan.known(down):
        raise ValueError(f"worker {down!r} is not in the plan")
    actions: list[tuple[str, str]] = []
    starved: str | None = None
    for stage, routes in plan.stages.items():
        routes.active.discard(down)
        if down in routes.standbys:
            routes.standbys.remove(down)
        while len(routes.active) < routes.min_routes:
            if not routes.standbys:
                starved = starved or stage
                break
            promoted = routes.standbys.pop(0)
            routes.active.add(promoted)
            actions.append((stage, promoted))
    if starved is not None:
        raise NoStandbyAvailable(starved, actions)
    return actions


class HealingSupervisor:
    """Watches node-down events and starts standby tiers to fill the gap.

    The plan maps stage names to tier identifiers. Promotions go through
    runtime.start_tier, so a promoted standby begins serving its queues;
    every promotion is published as a healing_action event, a shortfall as
    a critical_alert event.
    """

    def __init__(self, runtime, plan: ReplicaPlan):
        self.runtime = runtime
        self.plan = plan
        self._lock = threading.Lock()
        runtime.gmt.add_listener(self._on_event)

    def _on_event(self, event: dict) -> None:
        if event.get("event") != "node_down":
            return
        node_id = event["node_id"]
        with self._lock:
            lost = [
                tier_id
                for routes in self.plan.stages.values()
                for tier_id in list(routes.active)
                if self._node_of(tier_id) == node_id
            ]
            for tier_id in lost:
                try:
                    actions = heal(self.plan, tier_id)
                except NoStandbyAvailable as exc:
                    self._promote(exc.actions, replaced=tier_id)
                    self.runtime.gmt.emit(
                        "critical_alert",
                        reason="no_standby_available",
                        stage=exc.stage,
                        tier_id=tier_id,
                    )
                    continue
                self._promote(actions, replaced=tier_id)

    def _node_of(self, tier_id: str) -> str | None:
        try:
            return self.runtime.gmt.find_tier(tier_id).node_id
        except Exception:
            return None

    def _promote(self, actions: list[tuple[str, str]], replaced: str) -> None:
        for stage, standby in actions:
            self.runtime.start_tier(standby)
            self.runtime.gmt.emit(
                "healing_action", stage=stage, promoted=standby, replaced=replaced
            )


# -- self-protection -----------------------------------------------------------------

@dataclass(frozen=True)
class ProtectDecision:
    accepted: bool
    envelope: TransportEnvelope | None
    reason: str | None


def protect_check(
    frame: bytes, key: bytes, emit: Callable[..., object] | None = None
) -> ProtectDecision:
    """Admission check for one wire frame: recompute the MAC and decide.

    Emits message_is_coming, then message_secure or message_insecure; a
    rejected frame yields no envelope, so it cannot be delivered.
    """
    if emit is not None:
        emit("message_is_coming", size=len(frame))
    try:
        envelope = decode_frame(frame, key)
    except MacMismatch:
        if emit is not None:
            emit("message_insecure", reason="mac mismatch")
        return ProtectDecision(False, None, "mac mismatch")
    except MalformedFrame as exc:
        if emit is not None:
            emit("message_insecure", reason=str(exc))
        return ProtectDecision(False, None, str(exc))
    if emit is not None:
        emit("message_secure", envelope_kind=envelope.kind.name.lower())
    return ProtectDecision(True, envelope, None)


# -- self-optimization: transport selection --------------------------------------------

class ProbeStats:
    """Bounded per-transport windows of round-trip samples."""

    def __init__(self, window: int = 16):
        self.window = window
        self.samples: dict[str, deque] = {}
        self.last_probe: dict[str, int] = {}

    def record(self, transport: str, rtt_ms: float) -> None:
        bucket = self.samples.get(transport)
        if bucket is None:
            bucket = self.samples[transport] = deque(maxlen=self.window)
        bucket.append(rtt_ms)
        self.last_probe[transport] = now_ms()

    def medians(self) -> dict[str, float]:
        return {t: statistics.median(w) for t, w in self.samples.items() if w}


class TransportSelector:
    """Sticky minimum-median choice with a 0.8 switch threshold.

    The incumbent keeps its job unless a challenger's median beats it by
    the hysteresis factor, which stops flapping between transports whose
    latencies sit close together.
    """

    def __init__(self, preference: tuple[str, ...] = (), hysteresis: float = 0.8):
        self.preference = tuple(preference)
        self.hysteresis = hysteresis
        self.current: str | None = None

    def _rank(self, name: str) -> tuple:
        try:
            return (self.preference.index(name), "")
        except ValueError:
            return (len(self.preference), name)

    def select(self, stats: ProbeStats) -> str:
        medians = stats.medians()
        if not medians:
            raise NoProbes("no transport has any probe")
        best = min(medians, key=lambda t: (medians[t], self._rank(t)))
        if self.current is None or self.current not in medians:
            self.current = best
        elif best != self.current:
            if medians[best] < self.hysteresis * medians[self.current]:
                self.current = best
        return self.current


def optimize_select(
    stats: ProbeStats,
    *,
    current: str | None = None,
    preference: tuple[str, ...] = (),
    hysteresis: float = 0.8,
) -> str:
    """One-shot form of the selection rule for callers without a selector."""
    selector = TransportSelector(preference, hysteresis)
    selector.current = current
    return selector.select(stats)


# -- self-optimization: training-set replication -----------------------------------------

@dataclass(frozen=True)
class ReplicationReport:
    digest: bytes
    acks: dict[str, str]  # worker -> "stored" | "match"
    bytes_shipped: dict[str, int]


class TrainingReplica:
    """Reference holder for a replicated training set dump."""

    def __init__(self):
        self._blob: bytes | None = None

    def digest(self) -> bytes | None:
        if self._blob is None:
            return None
        return hashlib.sha256(self._blob).digest()

    def store(self, blob: bytes) -> None:
        self._blob = blob

    def blob(self) -> bytes | None:
        return self._blob


def replicate_training(
    ts: TrainingSet, replicas: Mapping[str, object]
) -> ReplicationReport:
    """Ship the BINARY dump to every replica that does not already hold it.

    A replica advertising the right digest costs zero bytes. Unreachable
    replicas (anything raising) are collected into ReplicationIncomplete,
    with the partial report attached.
    """
    blob = dump_bytes(ts, DUMP_BINARY)
    want = hashlib.sha256(blob).digest()
    acks: dict[str, str] = {}
    shipped: dict[str, int] = {}
    failed: dict[str, str] = {}
    for name in sorted(replicas):
        replica = replicas[name]
        try:
            if replica.digest() == want:
                acks[name] = "match"
                shipped[name] = 0
            else:
                replica.store(blob)
                acks[name] = "stored"
                shipped[name] = len(blob)
        except Exception as exc:
            failed[name] = str(exc)
    report = ReplicationReport(want, acks, shipped)
    if failed:
        raise ReplicationIncomplete(failed, report)
    return report
