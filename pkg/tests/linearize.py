"""Linearizability checking for concurrent demand-store histories.

A history is a list of completed operations with globally ordered invoke and
return ticks. An operation may be linearized first among the remaining ones
only if no other remaining operation returned before it was invoked. The
checker searches for any such order whose replay on the sequential oracle
reproduces every recorded result, memoizing on (remaining ops, oracle state).

The oracle adopts concrete global ids from the history: the first deposit it
replays for a signature binds that signature to the returned id, and every
later deposit must agree. Checkout results must match the oracle's FIFO head.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Op:
    op_id: int
    thread: int
    name: str  # deposit | checkout | complete | lookup
    args: tuple
    result: object
    invoked: int
    returned: int


class HistoryRecorder:
    """Assigns globally ordered invoke/return ticks to concurrent calls."""

    def __init__(self):
        self._tick = itertools.count()
        self._lock = threading.Lock()
        self.ops: list[Op] = []
        self._ids = itertools.count()

    def tick(self) -> int:
        with self._lock:
            return next(self._tick)

    def record(self, thread: int, name: str, args: tuple, result, invoked: int, returned: int):
        with self._lock:
            self.ops.append(
                Op(next(self._ids), thread, name, args, result, invoked, returned)
            )


class SequentialStoreOracle:
    """Pure sequential model of the store's {deposit, checkout, complete, lookup}."""

    def __init__(self):
        self.entries: dict[bytes, dict] = {}  # sig -> {gid, state, value, owner, seq}
        self.order: list[bytes] = []  # deposit order
        self.seq = 0

    def copy(self) -> "SequentialStoreOracle":
        o = SequentialStoreOracle()
        o.entries = {k: dict(v) for k, v in self.entries.items()}
        o.order = list(self.order)
        o.seq = self.seq
        return o

    def fingerprint(self) -> tuple:
        return tuple(
            (sig, e["gid"], e["state"], e["value"], e["owner"])
            for sig, e in sorted(self.entries.items())
        )

    def step(self, op: Op) -> bool:
        """Replay `op`; return True iff the recorded result is the one the
        sequential semantics produce at this point."""
        if op.name == "deposit":
            (sig,) = op.args
            got_gid, got_value = op.result
            entry = self.entries.get(sig)
            if entry is not None:
                return got_gid == entry["gid"] and got_value == (
                    entry["value"] if entry["state"] == "computed" else None
                )
            if got_value is not None:
                return False
            if any(e["gid"] == got_gid for e in self.entries.values()):
                return False  # fresh deposit cannot reuse an existing id
            self.seq += 1
            self.entries[sig] = {
                "gid": got_gid,
                "state": "pending",
                "value": None,
                "owner": None,
                "seq": self.seq,
            }
            self.order.append(sig)
            return True

        if op.name == "checkout":
            (worker,) = op.args
            got_sig = op.result
            head = next(
                (s for s in self.order if self.entries[s]["state"] == "pending"), None
            )
            if got_sig is None:
                return head is None
            if head != got_sig:
                return False
            self.entries[head]["state"] = "processing"
            self.entries[head]["owner"] = worker
            return True

        if op.name == "complete":
            gid, worker, value = op.args
            entry = next((e for e in self.entries.values() if e["gid"] == gid), None)
            if entry is None:
                return op.result == "UnknownEntry"
            if entry["state"] == "computed":
                if entry["value"] == value:
                    return op.result == "ok"
                return op.result == "InconsistentResult"
            if entry["owner"] != worker:
                return op.result == "NotOwner"
            if op.result != "ok":
                return False
            entry["state"] = "computed"
            entry["value"] = value
            entry["owner"] = None
            return True

        if op.name == "lookup":
            (sig,) = op.args
            entry = self.entries.get(sig)
            expected = (
                entry["value"] if entry and entry["state"] == "computed" else None
            )
            return op.result == expected

        raise AssertionError(f"unknown op {op.name}")


def is_linearizable(ops: list[Op]) -> bool:
    if not ops:
        return True
    all_ids = frozenset(o.op_id for o in ops)
    by_id = {o.op_id: o for o in ops}
    seen: set[tuple] = set()

    def search(remaining: frozenset, oracle: SequentialStoreOracle) -> bool:
        if not remaining:
            return True
        key = (remaining, oracle.fingerprint())
        if key in seen:
            return False
        seen.add(key)
        min_return = min(by_id[i].returned for i in remaining)
        for op_id in remaining:
            op = by_id[op_id]
            if op.invoked > min_return:
                continue  # some remaining op returned before this was invoked
            candidate = oracle.copy()
            if candidate.step(op):
                if search(remaining - {op_id}, candidate):
                    return True
        return False

    return search(all_ids, SequentialStoreOracle())
