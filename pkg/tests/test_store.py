"""Demand store behavior: idempotent deposit, FIFO checkout, leases, LRU gc."""
from __future__ import annotations

import threading
from dataclasses import replace

import pytest

from eduction_rt.demand import Context, DemandKind, DemandState, make_demand
from eduction_rt.store import (
    DemandStore,
    InconsistentResult,
    NotOwner,
    StoreConfig,
    UnknownEntry,
)


def proc(i: int, pid: str = "p") -> "Demand":
    return make_demand(DemandKind.PROCEDURAL, pid, Context.of(i=i), b"", origin_tier="DGT-0")


def fresh(lease_ms: int = 5000, capacity: int = 64) -> DemandStore:
    return DemandStore(StoreConfig(lease_ms=lease_ms, warehouse_capacity=capacity))


def test_deposit_is_idempotent():
    s = fresh()
    d = proc(1)
    gid1, val1 = s.deposit(d, now=0)
    gid2, val2 = s.deposit(d, now=1)
    assert gid1 == gid2
    assert val1 is None and val2 is None
    assert s.counts()[DemandState.PENDING] == 1


def test_deposit_after_complete_returns_value_without_new_entry():
    s = fresh()
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    got = s.checkout("w1", now=0)
    assert got is not None and got.signature == d.signature
    s.complete(gid, "w1", b"forty-two", now=5)
    gid2, val = s.deposit(d, now=10)
    assert gid2 == gid
    assert val == b"forty-two"
    assert s.counts()[DemandState.COMPUTED] == 1
    assert sum(s.counts().values()) == 1


def test_deposit_requires_pending_demand():
    s = fresh()
    d = replace(proc(1), state=DemandState.PROCESSING)
    with pytest.raises(ValueError):
        s.deposit(d, now=0)


def test_checkout_empty_store_returns_none():
    assert fresh().checkout("w1", now=0) is None


def test_checkout_fifo_by_deposit_order():
    s = fresh()
    d1, d2 = proc(1), proc(2)
    s.deposit(d1, now=0)
    s.deposit(d2, now=0)
    first = s.checkout("w1", now=1)
    second = s.checkout("w2", now=1)
    assert first.signature == d1.signature
    assert second.signature == d2.signature
    assert first.state is DemandState.PROCESSING


def test_concurrent_checkout_single_pending_has_one_winner():
    s = fresh()
    s.deposit(proc(1), now=0)
    results = []
    barrier = threading.Barrier(2)

    def worker(name: str):
        barrier.wait()
        results.append(s.checkout(name, now=1))

    threads = [threading.Thread(target=worker, args=(f"w{i}",)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    winners = [r for r in results if r is not None]
    assert len(winners) == 1


def test_checkout_kind_filter():
    s = fresh()
    intensional = make_demand(DemandKind.INTENSIONAL, "p", Context.of(i=1), b"id")
    s.deposit(intensional, now=0)
    s.deposit(proc(2), now=0)
    got = s.checkout("w1", now=1, kinds=(DemandKind.PROCEDURAL,))
    assert got is not None and got.kind is DemandKind.PROCEDURAL
    # Unfiltered checkout still sees the intensional entry, FIFO position intact.
    assert s.checkout("w1", now=1).kind is DemandKind.INTENSIONAL


def test_complete_then_lookup_hits():
    s = fresh()
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    s.checkout("w1", now=0)
    s.complete(gid, "w1", b"val", now=2)
    assert s.lookup(d.signature, now=3) == b"val"
    entry = s.entry(d.signature)
    assert entry.hits == 1
    assert entry.demand.access_number == 1


def test_lookup_miss_and_hit_counting():
    s = fresh()
    d = proc(1)
    assert s.lookup(d.signature, now=0) is None
    gid, _ = s.deposit(d, now=0)
    assert s.lookup(d.signature, now=0) is None  # pending is not a warehouse hit
    s.checkout("w1", now=0)
    s.complete(gid, "w1", b"v", now=1)
    for i in range(5):
        assert s.lookup(d.signature, now=2 + i) == b"v"
    assert s.entry(d.signature).hits == 5
    assert s.entry(d.signature).demand.access_number == 5


def test_double_complete_equal_value_is_noop():
    s = fresh()
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    s.checkout("w1", now=0)
    s.complete(gid, "w1", b"v", now=1)
    hits_before = s.entry(d.signature).hits
    s.complete(gid, "w1", b"v", now=2)  # no error, no change
    assert s.entry(d.signature).hits == hits_before
    assert s.metrics["completions_total"] == 1


def test_complete_conflicting_value_raises():
    s = fresh()
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    s.checkout("w1", now=0)
    s.complete(gid, "w1", b"v", now=1)
    with pytest.raises(InconsistentResult):
        s.complete(gid, "w1", b"OTHER", now=2)
    assert s.metrics["inconsistent_results"] == 1


def test_complete_wrong_owner_and_unknown_entry():
    s = fresh()
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    s.checkout("w1", now=0)
    with pytest.raises(NotOwner):
        s.complete(gid, "w2", b"v", now=1)
    import uuid

    with pytest.raises(UnknownEntry):
        s.complete(uuid.uuid4(), "w1", b"v", now=1)


def test_complete_after_lease_expiry_is_not_owner():
    s = fresh(lease_ms=100)
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    s.checkout("w1", now=0)
    assert s.expire_leases(now=101) == 1
    with pytest.raises(NotOwner):
        s.complete(gid, "w1", b"v", now=102)


def test_expire_leases_enables_second_worker_single_value():
    s = fresh(lease_ms=100)
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    first = s.checkout("w1", now=0)
    assert first is not None
    assert s.expire_leases(now=50) == 0
    assert s.expire_leases(now=101) == 1
    second = s.checkout("w2", now=102)
    assert second is not None and second.signature == d.signature
    s.complete(gid, "w2", b"result", now=103)
    assert s.lookup(d.signature, now=104) == b"result"
    assert s.metrics["completions_total"] == 1


def test_expiry_preserves_fifo_position():
    s = fresh(lease_ms=10)
    d1, d2 = proc(1), proc(2)
    s.deposit(d1, now=0)
    s.deposit(d2, now=0)
    s.checkout("w1", now=0)  # takes d1
    s.expire_leases(now=11)
    # d1 re-pends at its original deposit position, ahead of d2.
    assert s.checkout("w2", now=12).signature == d1.signature


def test_claim_specific_entry():
    s = fresh()
    d = proc(1)
    gid, _ = s.deposit(d, now=0)
    assert s.claim(gid, "DGT-0", now=0) is True
    assert s.claim(gid, "DGT-1", now=0) is False
    assert s.checkout("w1", now=1) is None  # nothing pending anymore
    s.complete(gid, "DGT-0", b"v", now=2)
    assert s.lookup(d.signature, now=3) == b"v"


class LruOracle:
    """Independent LRU model: dict of sig -> last_hit, evict smallest."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.ages: dict[bytes, tuple[int, int]] = {}
        self.tick = 0

    def store(self, sig: bytes, now: int):
        self.tick += 1
        self.ages[sig] = (now, self.tick)

    def hit(self, sig: bytes, now: int):
        self.tick += 1
        self.ages[sig] = (now, self.tick)

    def gc(self) -> set[bytes]:
        evicted = set()
        while len(self.ages) > self.capacity:
            victim = min(self.ages, key=lambda s: self.ages[s])
            del self.ages[victim]
            evicted.add(victim)
        return evicted


def test_gc_under_capacity_no_evictions():
    s = fresh(capacity=4)
    for i in range(3):
        d = proc(i)
        gid, _ = s.deposit(d, now=0)
        s.checkout("w", now=0)
        s.complete(gid, "w", b"v", now=1)
    assert s.gc(now=2) == 0


def test_gc_evicts_least_recently_hit():
    s = fresh(capacity=2)
    oracle = LruOracle(2)
    demands = [proc(i) for i in (1, 2, 3)]
    for step, d in enumerate(demands):
        gid, _ = s.deposit(d, now=step)
        s.checkout("w", now=step)
        s.complete(gid, "w", f"v{step}".encode(), now=step)
        oracle.store(d.signature.digest, step)
    s.lookup(demands[0].signature, now=10)
    oracle.hit(demands[0].signature.digest, 10)
    s.lookup(demands[2].signature, now=11)
    oracle.hit(demands[2].signature.digest, 11)
    expected_evicted = oracle.gc()
    assert s.gc(now=12) == len(expected_evicted) == 1
    assert {demands[1].signature.digest} == expected_evicted
    assert s.lookup(demands[1].signature, now=13) is None
    assert s.lookup(demands[0].signature, now=13) is not None


def test_evicted_signature_recomputes_once():
    s = fresh(capacity=1)
    d1, d2 = proc(1), proc(2)
    for step, d in enumerate((d1, d2)):
        gid, _ = s.deposit(d, now=step)
        s.checkout("w", now=step)
        s.complete(gid, "w", b"v", now=step)
    s.lookup(d2.signature, now=5)
    assert s.gc(now=6) == 1  # d1 evicted (never hit)
    gid, val = s.deposit(d1, now=7)
    assert val is None  # work must be redone
    assert s.checkout("w", now=8).signature == d1.signature
    s.complete(gid, "w", b"v2", now=9)
    assert s.lookup(d1.signature, now=10) == b"v2"


def test_gc_never_evicts_pending_or_processing():
    s = fresh(capacity=1)
    d1, d2, d3 = proc(1), proc(2), proc(3)
    gid1, _ = s.deposit(d1, now=0)
    s.checkout("w", now=0)
    s.complete(gid1, "w", b"v", now=1)
    s.deposit(d2, now=2)  # stays pending
    gid3, _ = s.deposit(d3, now=3)
    s.checkout("w", now=3)  # d2? no - FIFO: d2 first
    # Regardless of which got checked out, non-computed entries must survive gc.
    s.gc(now=4)
    states = s.counts()
    assert states[DemandState.PENDING] + states[DemandState.PROCESSING] == 2


def test_threaded_workers_complete_each_demand_exactly_once():
    s = fresh()
    demands = [proc(i) for i in range(16)]
    gids = {}
    for d in demands:
        gid, _ = s.deposit(d, now=0)
        gids[d.signature] = gid

    def worker(name: str):
        while True:
            got = s.checkout(name, now=1)
            if got is None:
                return
            s.complete(gids[got.signature], name, b"r:" + got.signature.digest[:4], now=2)

    threads = [threading.Thread(target=worker, args=(f"w{i}",)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert s.metrics["completions_total"] == 16
    assert s.counts()[DemandState.COMPUTED] == 16
    assert sum(s.metrics["completions_by_worker"].values()) == 16


def test_snapshot_round_trip(tmp_path):
    s = fresh()
    computed = proc(1)
    gid, _ = s.deposit(computed, now=0)
    s.checkout("w1", now=0)
    s.complete(gid, "w1", b"stored-value", now=1)
    s.deposit(proc(2), now=2)  # pending
    gid3, _ = s.deposit(proc(3), now=3)
    s.checkout("w2", now=3)  # processing; must revert to pending on load

    path = tmp_path / "store.snap"
    s.save_snapshot(path)
    restored = DemandStore.load_snapshot(path, StoreConfig())
    assert restored.lookup(computed.signature, now=5) == b"stored-value"
    counts = restored.counts()
    assert counts[DemandState.COMPUTED] == 1
    assert counts[DemandState.PENDING] == 2
    assert counts[DemandState.PROCESSING] == 0
    # FIFO order survives: i=2 deposited before i=3.
    assert restored.checkout("w", now=6).context.get("i") == 2
