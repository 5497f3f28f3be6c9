"""The demand store: dispatch entries, atomic checkout/complete, and the
memoizing value warehouse.

One entry exists per signature. Deposits are idempotent (same global id back
every time), checkout hands out the oldest Pending entry under a lease, and a
late or duplicate complete can never store a second value for a signature:
that is where the exactly-once effect of the whole runtime lives.

Snapshot file layout: a version byte 0x01 followed by length-prefixed entry
records (see `_entry_to_bytes`), written to a temp file and renamed into
place.
"""
from __future__ import annotations

import heapq
import os
import struct
import threading
import uuid
from dataclasses import dataclass, field, replace

from .demand import (
    Demand,
    DemandEvent,
    DemandKind,
    DemandSignature,
    DemandState,
    demand_from_bytes,
    demand_to_bytes,
    procedural_worker,
    transition,
)

SNAPSHOT_VERSION = 0x01


class StoreError(Exception):
    """Base class for demand-store errors."""


class UnknownEntry(StoreError):
    def __init__(self, global_id: uuid.UUID):
        super().__init__(f"no dispatch entry with global id {global_id}")
        self.global_id = global_id


class NotOwner(StoreError):
    def __init__(self, worker_id: str, owner: str | None):
        super().__init__(f"worker {worker_id!r} does not hold the lease (owner: {owner!r})")
        self.worker_id = worker_id
        self.owner = owner


class InconsistentResult(StoreError):
    def __init__(self, signature: DemandSignature):
        super().__init__(f"conflicting result bytes for signature {signature}")
        self.signature = signature


class SnapshotCorrupt(StoreError):
    """Raised when a snapshot file does not decode."""


@dataclass
class StoreConfig:
    lease_ms: int = 5000
    warehouse_capacity: int = 4096
    gc_policy: str = "LRU"

    def __post_init__(self):
        if self.lease_ms <= 0:
            raise ValueError("lease_ms must be positive")
        if self.warehouse_capacity <= 0:
            raise ValueError("warehouse_capacity must be positive")
        if self.gc_policy != "LRU":
            raise ValueError(f"unknown gc policy {self.gc_policy!r}")


@dataclass
class DispatchEntry:
    """Mutable bookkeeping record; only ever touched under the store lock."""

    global_id: uuid.UUID
    demand: Demand
    seq: int
    value: bytes | None = None
    owner: str | None = None
    lease_deadline: int | None = None
    stored_at: int = 0
    last_hit: int = 0
    hits: int = 0

    @property
    def state(self) -> DemandState:
        return self.demand.state

    def view(self) -> "DispatchEntry":
        return replace(self)


class DemandStore:
    """Thread-safe in-memory demand store with an LRU-bounded warehouse.

    `on_new_pending(demand, global_id)` fires whenever an entry becomes
    Pending (fresh deposit or lease expiry); `on_completed(signature, value)`
    fires when an entry reaches Computed. Hooks run outside the lock.
    """

    def __init__(self, config: StoreConfig | None = None, *,
                 on_new_pending=None, on_completed=None):
        self.config = config or StoreConfig()
        self.on_new_pending = on_new_pending
        self.on_completed = on_completed
        self._lock = threading.RLock()
        self._entries: dict[bytes, DispatchEntry] = {}
        self._by_gid: dict[uuid.UUID, bytes] = {}
        self._pending: list[tuple[int, bytes]] = []  # (deposit seq, sig digest)
        self._seq = 0
        self.metrics: dict = {
            "completions_total": 0,
            "completions_by_worker": {},
            "inconsistent_results": 0,
            "evictions": 0,
            "lease_expirations": 0,
        }

    # -- core operations ---------------------------------------------------

    def deposit(self, demand: Demand, now: int = 0) -> tuple[uuid.UUID, bytes | None]:
        if demand.state is not DemandState.PENDING:
            raise ValueError("deposit requires a Pending demand")
        notify = None
        with self._lock:
            key = demand.signature.digest
            entry = self._entries.get(key)
            if entry is not None:
                return entry.global_id, entry.value
            self._seq += 1
            entry = DispatchEntry(
                global_id=uuid.uuid4(), demand=demand, seq=self._seq, stored_at=now
            )
            self._entries[key] = entry
            self._by_gid[entry.global_id] = key
            heapq.heappush(self._pending, (entry.seq, key))
            notify = (entry.demand, entry.global_id)
        if notify and self.on_new_pending:
            self.on_new_pending(*notify)
        return entry.global_id, None

    def checkout(
        self,
        worker_id: str,
        now: int,
        kinds: tuple[DemandKind, ...] | None = None,
        workers: frozenset[str] | None = None,
    ) -> Demand | None:
        out = self.checkout_entry(worker_id, now, kinds, workers)
        return out[1] if out else None

    def checkout_entry(
        self,
        worker_id: str,
        now: int,
        kinds: tuple[DemandKind, ...] | None = None,
        workers: frozenset[str] | None = None,
    ) -> tuple[uuid.UUID, Demand] | None:
        """Like checkout, but also returns the global id (used by the RPC layer).

        `workers` narrows procedural checkout to demands whose payload names
        one of the given worker functions, so a tier only ever leases work it
        can actually execute.
        """
        with self._lock:
            skipped: list[tuple[int, bytes]] = []
            try:
                while self._pending:
                    seq, key = heapq.heappop(self._pending)
                    entry = self._entries.get(key)
                    if entry is None or entry.state is not DemandState.PENDING or entry.seq != seq:
                        continue  # stale heap residue
                    if kinds is not None and entry.demand.kind not in kinds:
                        skipped.append((seq, key))
                        continue
                    if (
                        workers is not None
                        and entry.demand.kind is DemandKind.PROCEDURAL
                        and procedural_worker(entry.demand.payload) not in workers
                    ):
                        skipped.append((seq, key))
                        continue
                    self._mark_processing(entry, worker_id, now)
                    return entry.global_id, entry.demand
                return None
            finally:
                for item in skipped:
                    heapq.heappush(self._pending, item)

    def claim(self, global_id: uuid.UUID, owner_id: str, now: int) -> bool:
        """Take ownership of one specific Pending entry (generator self-claim)."""
        with self._lock:
            key = self._by_gid.get(global_id)
            if key is None:
                raise UnknownEntry(global_id)
            entry = self._entries[key]
            if entry.state is not DemandState.PENDING:
                return False
            self._mark_processing(entry, owner_id, now)
            return True

    def _mark_processing(self, entry: DispatchEntry, owner: str, now: int) -> None:
        entry.demand = replace(
            entry.demand, state=transition(entry.state, DemandEvent.DISPATCH)
        )
        entry.owner = owner
        entry.lease_deadline = now + self.config.lease_ms

    def complete(self, global_id: uuid.UUID, worker_id: str, value: bytes, now: int = 0) -> None:
        notify = None
        with self._lock:
            key = self._by_gid.get(global_id)
            if key is None:
                raise UnknownEntry(global_id)
            entry = self._entries[key]
            if entry.state is DemandState.COMPUTED:
                if entry.value == value:
                    return  # idempotent replay
                self.metrics["inconsistent_results"] += 1
                raise InconsistentResult(entry.demand.signature)
            if entry.owner != worker_id:
                raise NotOwner(worker_id, entry.owner)
            demand = replace(
                entry.demand, state=transition(entry.state, DemandEvent.RESULT_STORED)
            )
            last_ts = demand.timeline[-1][1] if demand.timeline else 0
            demand = replace(demand, timeline=demand.timeline + ((worker_id, max(now, last_ts)),))
            entry.demand = demand
            entry.value = value
            entry.owner = None
            entry.lease_deadline = None
            entry.stored_at = now
            entry.last_hit = now
            entry.hits = 0
            self.metrics["completions_total"] += 1
            per_worker = self.metrics["completions_by_worker"]
            per_worker[worker_id] = per_worker.get(worker_id, 0) + 1
            notify = (entry.demand.signature, value)
        if notify and self.on_completed:
            self.on_completed(*notify)

    def lookup(self, signature: DemandSignature, now: int = 0) -> bytes | None:
        with self._lock:
            entry = self._entries.get(signature.digest)
            if entry is None or entry.state is not DemandState.COMPUTED:
                return None
            entry.hits += 1
            entry.last_hit = now
            entry.demand = replace(entry.demand, access_number=entry.demand.access_number + 1)
            return entry.value

    def expire_leases(self, now: int) -> int:
        reverted = []
        with self._lock:
            for entry in self._entries.values():
                if (
                    entry.state is DemandState.PROCESSING
                    and entry.lease_deadline is not None
                    and entry.lease_deadline < now
                ):
                    entry.demand = replace(
                        entry.demand, state=transition(entry.state, DemandEvent.WORKER_LOST)
                    )
                    entry.owner = None
                    entry.lease_deadline = None
                    entry.stored_at = now  # restart the pending-age clock
                    heapq.heappush(self._pending, (entry.seq, entry.demand.signature.digest))
                    reverted.append((entry.demand, entry.global_id))
            self.metrics["lease_expirations"] += len(reverted)
        if self.on_new_pending:
            for demand, gid in reverted:
                self.on_new_pending(demand, gid)
        return len(reverted)

    def gc(self, now: int) -> int:
        with self._lock:
            computed = [e for e in self._entries.values() if e.state is DemandState.COMPUTED]
            overshoot = len(computed) - self.config.warehouse_capacity
            if overshoot <= 0:
                return 0
            computed.sort(key=lambda e: (e.last_hit, e.seq))
            for victim in computed[:overshoot]:
                key = victim.demand.signature.digest
                del self._entries[key]
                del self._by_gid[victim.global_id]
            self.metrics["evictions"] += overshoot
            return overshoot

    # -- inspection --------------------------------------------------------

    def entry(self, signature: DemandSignature) -> DispatchEntry | None:
        with self._lock:
            entry = self._entries.get(signature.digest)
            return entry.view() if entry else None

    def global_id_of(self, signature: DemandSignature) -> uuid.UUID | None:
        with self._lock:
            entry = self._entries.get(signature.digest)
            return entry.global_id if entry else None

    def counts(self) -> dict[DemandState, int]:
        with self._lock:
            out = {state: 0 for state in DemandState}
            for entry in self._entries.values():
                out[entry.state] += 1
            return out

    def entries_by_state(self, state: DemandState | None = None) -> list[DispatchEntry]:
        with self._lock:
            entries = [e.view() for e in self._entries.values()
                       if state is None or e.state is state]
            entries.sort(key=lambda e: e.seq)
            return entries

    def pending_older_than(self, now: int, age_ms: int) -> list[tuple[Demand, uuid.UUID]]:
        """Pending entries deposited (or re-pended) long enough ago to re-announce."""
        with self._lock:
            out = []
            for entry in self._entries.values():
                if entry.state is DemandState.PENDING and now - entry.stored_at >= age_ms:
                    out.append((entry.demand, entry.global_id))
            return out

    def take_stale_pending(self, now: int, age_ms: int) -> list[tuple[Demand, uuid.UUID]]:
        """Stale Pending entries for re-announcement, with their age clocks reset
        so one lost notification is repaired once per sweep, not every sweep."""
        with self._lock:
            out = []
            for entry in self._entries.values():
                if entry.state is DemandState.PENDING and now - entry.stored_at >= age_ms:
                    entry.stored_at = now
                    out.append((entry.demand, entry.global_id))
            return out

    # -- persistence -------------------------------------------------------

    def save_snapshot(self, path) -> None:
        with self._lock:
            blob = bytearray([SNAPSHOT_VERSION])
            for entry in sorted(self._entries.values(), key=lambda e: e.seq):
                record = _entry_to_bytes(entry)
                blob += struct.pack(">I", len(record)) + record
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(bytes(blob))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load_snapshot(cls, path, config: StoreConfig | None = None, **hooks) -> "DemandStore":
        store = cls(config, **hooks)
        with open(path, "rb") as fh:
            data = fh.read()
        if not data or data[0] != SNAPSHOT_VERSION:
            raise SnapshotCorrupt(f"bad snapshot version in {path}")
        pos = 1
        while pos < len(data):
            if pos + 4 > len(data):
                raise SnapshotCorrupt("truncated snapshot record header")
            (length,) = struct.unpack(">I", data[pos : pos + 4])
            pos += 4
            if pos + length > len(data):
                raise SnapshotCorrupt("truncated snapshot record")
            entry = _entry_from_bytes(data[pos : pos + length])
            pos += length
            # In-flight leases do not survive a restart: owners are gone.
            if entry.state is DemandState.PROCESSING:
                entry.demand = replace(entry.demand, state=DemandState.PENDING)
                entry.owner = None
                entry.lease_deadline = None
            key = entry.demand.signature.digest
            store._entries[key] = entry
            store._by_gid[entry.global_id] = key
            if entry.state is DemandState.PENDING:
                heapq.heappush(store._pending, (entry.seq, key))
            store._seq = max(store._seq, entry.seq)
        return store


def _entry_to_bytes(entry: DispatchEntry) -> bytes:
    demand_blob = demand_to_bytes(entry.demand)
    out = bytearray()
    out += entry.global_id.bytes
    out += struct.pack(">Q", entry.seq)
    out += struct.pack(">I", len(demand_blob)) + demand_blob
    if entry.value is None:
        out += struct.pack(">B", 0)
    else:
        out += struct.pack(">BI", 1, len(entry.value)) + entry.value
    out += struct.pack(">qqQ", entry.stored_at, entry.last_hit, entry.hits)
    return bytes(out)


def _entry_from_bytes(data: bytes) -> DispatchEntry:
    try:
        gid = uuid.UUID(bytes=data[:16])
        pos = 16
        (seq,) = struct.unpack(">Q", data[pos : pos + 8])
        pos += 8
        (dlen,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        demand = demand_from_bytes(data[pos : pos + dlen])
        pos += dlen
        has_value = data[pos]
        pos += 1
        value = None
        if has_value:
            (vlen,) = struct.unpack(">I", data[pos : pos + 4])
            pos += 4
            value = data[pos : pos + vlen]
            pos += vlen
        stored_at, last_hit, hits = struct.unpack(">qqQ", data[pos : pos + 24])
    except Exception as exc:
        raise SnapshotCorrupt(f"undecodable snapshot entry: {exc}") from exc
    return DispatchEntry(
        global_id=gid,
        demand=demand,
        seq=seq,
        value=value,
        stored_at=stored_at,
        last_hit=last_hit,
        hits=hits,
    )
