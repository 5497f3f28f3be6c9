"""Journal, healing, protection, and optimization tests.

The journal tests carry their own file-format reader (`oracle_replay`): it
scans the raw log bytes and computes the replay set by hand, so recovery
results are checked against an independent walk of the same bytes. The
torn-tail fuzz truncates a known-good log at every byte offset and demands
a clean open plus oracle-equal recovery each time.
"""
from __future__ import annotations

import hashlib
import random
import struct
import zlib
from pathlib import Path

import pytest

from eduction_rt.pipeline import (
    PipelineClient,
    PipelineConfig,
    empty_training_set,
    extract_features,
    load_sample,
    pipeline_worker_functions,
    preprocess,
    run_local,
    result_set_to_bytes,
    train,
)
from eduction_rt.resilience import (
    CorruptLog,
    DoubleCommit,
    HealingSupervisor,
    NoProbes,
    NoStandbyAvailable,
    ProbeStats,
    ReplicaPlan,
    ReplicationIncomplete,
    StageRoutes,
    TrainingReplica,
    TransportSelector,
    UnknownTxn,
    WalFull,
    WalLog,
    WalStatus,
    heal,
    optimize_select,
    protect_check,
    replicate_training,
)
from eduction_rt.runtime import GipsyRuntime
from eduction_rt.transport import EnvelopeKind, TransportEnvelope, encode_frame
from eduction_rt.transport.inproc import reset_brokers

HEADER = b"DWAL\x01"
FIXED = 8 + 8 + 1 + 4


def digest_of(n: int) -> bytes:
    return hashlib.sha256(str(n).encode()).digest()


def oracle_replay(data: bytes) -> list[tuple[int, str, bytes]]:
    """Independent linear scan of log bytes; complete records only."""
    if len(data) < len(HEADER):
        return []
    begun: dict[int, tuple[str, bytes]] = {}
    pos = len(HEADER)
    while pos + 4 <= len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        if pos + 4 + length > len(data):
            break
        chunk = data[pos + 4 : pos + 4 + length]
        body, crc = chunk[:-4], struct.unpack(">I", chunk[-4:])[0]
        assert zlib.crc32(body) == crc, "fuzz should only truncate, never corrupt"
        txn, _ts, status, stage_len = struct.unpack(">QqBI", body[:FIXED])
        stage = body[FIXED : FIXED + stage_len].decode()
        if status == 0x01:
            begun[txn] = (stage, body[FIXED + stage_len :])
        else:
            begun.pop(txn, None)
        pos += 4 + length
    return [(txn, begun[txn][0], begun[txn][1]) for txn in sorted(begun)]


def replay_view(log: WalLog) -> list[tuple[int, str, bytes]]:
    return [(r.txn_id, r.stage, r.payload_digest) for r in log.recover()]


class TestWalLog:
    def test_begin_commit_empty_replay(self, tmp_path):
        with WalLog(tmp_path / "a.wal") as log:
            txn = log.begin("document", digest_of(1))
            log.commit(txn)
            assert log.recover() == []

    def test_replay_set_matches_oracle(self, tmp_path):
        path = tmp_path / "b.wal"
        with WalLog(path) as log:
            t1 = log.begin("load", digest_of(1))
            t2 = log.begin("preprocess", digest_of(2))
            t3 = log.begin("extract", digest_of(3))
            log.commit(t1)
            log.commit(t3)
            assert replay_view(log) == [(t2, "preprocess", digest_of(2))]
        assert oracle_replay(path.read_bytes()) == [(t2, "preprocess", digest_of(2))]

    def test_empty_log_recovers_nothing(self, tmp_path):
        with WalLog(tmp_path / "c.wal") as log:
            assert log.recover() == []

    def test_reopen_restores_state(self, tmp_path):
        path = tmp_path / "d.wal"
        with WalLog(path) as log:
            txns = [log.begin(f"s{i}", digest_of(i)) for i in range(3)]
            log.commit(txns[1])
        with WalLog(path) as log:
            assert replay_view(log) == [
                (txns[0], "s0", digest_of(0)),
                (txns[2], "s2", digest_of(2)),
            ]
            assert log.begin("next", digest_of(9)) == txns[2] + 1

    def test_commit_unknown(self, tmp_path):
        with WalLog(tmp_path / "e.wal") as log:
            with pytest.raises(UnknownTxn):
                log.commit(41)

    def test_double_commit(self, tmp_path):
        with WalLog(tmp_path / "f.wal") as log:
            txn = log.begin("x", digest_of(0))
            log.commit(txn)
            with pytest.raises(DoubleCommit):
                log.commit(txn)

    def test_full_at_limit(self, tmp_path):
        with WalLog(tmp_path / "g.wal", max_entries=10) as log:
            for i in range(10):
                log.begin("x", digest_of(i))
            with pytest.raises(WalFull):
                log.begin("x", digest_of(99))
            # committing one frees one slot
            log.commit(1)
            log.begin("x", digest_of(100))

    def test_records_carry_status_and_time(self, tmp_path):
        with WalLog(tmp_path / "h.wal") as log:
            log.begin("stage", digest_of(1))
            record = log.recover()[0]
            assert record.status is WalStatus.BEGUN
            assert record.timestamp > 0

    def test_torn_tail_fuzz_never_errors(self, tmp_path):
        base = tmp_path / "full.wal"
        with WalLog(base) as log:
            rng = random.Random(5)
            open_txns = []
            for i in range(16):
                open_txns.append(log.begin(f"stage-{i % 4}", digest_of(i)))
                if open_txns and rng.random() < 0.4:
                    log.commit(open_txns.pop(rng.randrange(len(open_txns))))
        blob = base.read_bytes()
        for cut in range(len(blob) + 1):
            truncated = blob[:cut]
            path = tmp_path / "cut.wal"
            path.write_bytes(truncated)
            log = WalLog(path)
            try:
                assert replay_view(log) == oracle_replay(truncated), f"cut at {cut}"
            finally:
                log.close()

    def test_torn_tail_keeps_accepting_appends(self, tmp_path):
        base = tmp_path / "append.wal"
        with WalLog(base) as log:
            log.begin("a", digest_of(1))
            log.begin("b", digest_of(2))
        blob = base.read_bytes()
        base.write_bytes(blob[:-7])  # rip the final record
        with WalLog(base) as log:
            assert [r.stage for r in log.recover()] == ["a"]
            log.begin("c", digest_of(3))
        with WalLog(base) as log:
            assert [r.stage for r in log.recover()] == ["a", "c"]

    def test_mid_file_corruption_detected(self, tmp_path):
        path = tmp_path / "i.wal"
        with WalLog(path) as log:
            log.begin("a", digest_of(1))
            log.begin("b", digest_of(2))
        blob = bytearray(path.read_bytes())
        blob[len(HEADER) + 12] ^= 0x40  # inside the first record's body
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptLog):
            WalLog(path)

    def test_bad_header_detected(self, tmp_path):
        path = tmp_path / "j.wal"
        path.write_bytes(b"WALD\x01")
        with pytest.raises(CorruptLog):
            WalLog(path)

    def test_compact_drops_committed_pairs(self, tmp_path):
        path = tmp_path / "k.wal"
        with WalLog(path) as log:
            txns = [log.begin(f"s{i}", digest_of(i)) for i in range(6)]
            for txn in txns[:5]:
                log.commit(txn)
            before = path.stat().st_size
            log.compact()
            after = path.stat().st_size
            assert after < before
            assert replay_view(log) == [(txns[5], "s5", digest_of(5))]
        with WalLog(path) as log:
            assert replay_view(log) == [(txns[5], "s5", digest_of(5))]


# -- healing --------------------------------------------------------------------------

def one_stage_plan(active, standbys, min_routes=1) -> ReplicaPlan:
    return ReplicaPlan({"preprocess": StageRoutes(set(active), list(standbys), min_routes)})


class TestHeal:
    def test_promotes_standby_for_lost_sole_worker(self):
        plan = one_stage_plan({"w1"}, ["s1"])
        assert heal(plan, "w1") == [("preprocess", "s1")]
        assert plan.stages["preprocess"].active == {"s1"}
        assert plan.stages["preprocess"].standbys == []

    def test_no_promotion_when_routes_remain(self):
        plan = one_stage_plan({"w1", "w2"}, ["s1"])
        assert heal(plan, "w1") == []
        assert plan.stages["preprocess"].standbys == ["s1"]

    def test_standbys_promoted_in_order(self):
        plan = one_stage_plan({"w1", "w2"}, ["s1", "s2"], min_routes=2)
        assert heal(plan, "w2") == [("preprocess", "s1")]

    def test_no_standby_left(self):
        plan = one_stage_plan({"w1"}, [])
        with pytest.raises(NoStandbyAvailable) as exc:
            heal(plan, "w1")
        assert exc.value.stage == "preprocess"
        assert exc.value.actions == []

    def test_partial_actions_attached_to_shortfall(self):
        plan = ReplicaPlan(
            {
                "load": StageRoutes({"w1"}, ["s1"]),
                "classify": StageRoutes({"w1"}, []),
            }
        )
        with pytest.raises(NoStandbyAvailable) as exc:
            heal(plan, "w1")
        assert exc.value.stage == "classify"
        assert exc.value.actions == [("load", "s1")]

    def test_dead_standby_is_dropped(self):
        plan = one_stage_plan({"w1"}, ["s1", "s2"])
        heal(plan, "s1")
        assert plan.stages["preprocess"].standbys == ["s2"]
        assert plan.stages["preprocess"].active == {"w1"}

    def test_unknown_worker_rejected(self):
        with pytest.raises(ValueError):
            heal(one_stage_plan({"w1"}, []), "ghost")


# -- protection -----------------------------------------------------------------------

KEY = b"k" * 32


def make_frame(n: int) -> bytes:
    envelope = TransportEnvelope(
        EnvelopeKind.DEMAND, hashlib.sha256(b"sig%d" % n).digest(), b"payload-%d" % n
    )
    return encode_frame(envelope, KEY)


class TestProtectCheck:
    def test_valid_frame_accepted_with_events(self):
        events = []
        decision = protect_check(make_frame(1), KEY, lambda kind, **f: events.append(kind))
        assert decision.accepted
        assert decision.envelope is not None
        assert decision.envelope.payload == b"payload-1"
        assert events == ["message_is_coming", "message_secure"]

    def test_flipped_bit_rejected(self):
        frame = bytearray(make_frame(2))
        frame[-1] ^= 0x01  # payload corruption
        events = []
        decision = protect_check(bytes(frame), KEY, lambda kind, **f: events.append(kind))
        assert not decision.accepted
        assert decision.envelope is None
        assert decision.reason == "mac mismatch"
        assert events == ["message_is_coming", "message_insecure"]

    def test_garbage_rejected_not_raised(self):
        decision = protect_check(b"\x00\x01short", KEY)
        assert not decision.accepted

    def test_counting_harness(self):
        corrupted = {2, 5, 7}
        rejected = set()
        for i in range(10):
            frame = bytearray(make_frame(i))
            if i in corrupted:
                frame[70] ^= 0x10
            if not protect_check(bytes(frame), KEY).accepted:
                rejected.add(i)
        assert rejected == corrupted

    def test_no_false_positives_bulk(self):
        rng = random.Random(17)
        for i in range(500):
            envelope = TransportEnvelope(
                EnvelopeKind.RESULT,
                rng.randbytes(32),
                rng.randbytes(rng.randrange(0, 64)),
            )
            assert protect_check(encode_frame(envelope, KEY), KEY).accepted


# -- transport selection -----------------------------------------------------------------

def stats_of(**samples) -> ProbeStats:
    stats = ProbeStats()
    for name, values in samples.items():
        for v in values:
            stats.record(name, v)
    return stats


class TestTransportSelection:
    def test_min_median_wins(self):
        assert optimize_select(stats_of(inproc=[1, 1, 1], tcp=[5, 6, 5])) == "inproc"

    def test_hysteresis_keeps_incumbent(self):
        # challenger at 9 ms does not beat 0.8 * 10 ms
        stats = stats_of(tcp=[10, 10, 10], inproc=[9, 9, 9])
        assert optimize_select(stats, current="tcp") == "tcp"

    def test_clear_winner_replaces_incumbent(self):
        stats = stats_of(tcp=[10, 10, 10], inproc=[7, 7, 7])
        assert optimize_select(stats, current="tcp") == "inproc"

    def test_tie_broken_by_preference(self):
        stats = stats_of(tcp=[4, 4, 4], inproc=[4, 4, 4])
        assert optimize_select(stats, preference=("inproc", "tcp")) == "inproc"
        assert optimize_select(stats, preference=("tcp", "inproc")) == "tcp"

    def test_no_probes(self):
        with pytest.raises(NoProbes):
            optimize_select(ProbeStats())

    def test_window_is_bounded(self):
        stats = ProbeStats(window=4)
        for v in (100, 100, 100, 100, 1, 1, 1, 1):
            stats.record("tcp", v)
        assert stats.medians()["tcp"] == 1

    def test_converges_within_three_rounds_and_stays(self):
        rng = random.Random(23)
        selector = TransportSelector(preference=("tcp", "inproc"))
        stats = ProbeStats()
        history = []
        for _ in range(10):
            stats.record("tcp", 50 + rng.uniform(-2, 2))
            stats.record("inproc", 5 + rng.uniform(-1, 1))
            history.append(selector.select(stats))
        assert all(choice == "inproc" for choice in history[2:])

    def test_dead_incumbent_replaced(self):
        selector = TransportSelector()
        selector.current = "gone"
        assert selector.select(stats_of(tcp=[3, 3])) == "tcp"


# -- training replication -----------------------------------------------------------------

def trained_set():
    ts = empty_training_set()
    from eduction_rt.pipeline import FeatureVector

    ts = train(ts, 1, FeatureVector((0.25, 1.5), (("t", 0, 2),)))
    ts = train(ts, 2, FeatureVector((4.0, -3.0), (("t", 0, 2),)))
    return ts


class FailingReplica:
    def digest(self):
        raise ConnectionError("worker unreachable")

    def store(self, blob):
        raise AssertionError("must not be called")


class TestReplication:
    def test_all_workers_converge(self):
        replicas = {"w1": TrainingReplica(), "w2": TrainingReplica(), "w3": TrainingReplica()}
        report = replicate_training(trained_set(), replicas)
        assert set(report.acks) == {"w1", "w2", "w3"}
        assert all(ack == "stored" for ack in report.acks.values())
        blobs = {r.blob() for r in replicas.values()}
        assert len(blobs) == 1
        assert hashlib.sha256(next(iter(blobs))).digest() == report.digest

    def test_second_round_ships_nothing(self):
        replicas = {"w1": TrainingReplica(), "w2": TrainingReplica()}
        ts = trained_set()
        replicate_training(ts, replicas)
        again = replicate_training(ts, replicas)
        assert all(ack == "match" for ack in again.acks.values())
        assert all(n == 0 for n in again.bytes_shipped.values())

    def test_partial_failure_named(self):
        replicas = {"w1": TrainingReplica(), "w2": FailingReplica(), "w3": TrainingReplica()}
        with pytest.raises(ReplicationIncomplete) as exc:
            replicate_training(trained_set(), replicas)
        assert set(exc.value.failed) == {"w2"}
        assert exc.value.report.acks == {"w1": "stored", "w3": "stored"}
        assert replicas["w1"].blob() == replicas["w3"].blob()

    def test_changed_set_ships_again(self):
        replicas = {"w1": TrainingReplica()}
        ts = trained_set()
        replicate_training(ts, replicas)
        from eduction_rt.pipeline import FeatureVector

        grown = train(ts, 3, FeatureVector((9.0, 9.0), (("t", 0, 2),)))
        report = replicate_training(grown, replicas)
        assert report.acks == {"w1": "stored"}
        assert report.bytes_shipped["w1"] > 0


# -- supervisor over a live runtime ----------------------------------------------------------

@pytest.fixture(autouse=True)
def clean_buses():
    reset_brokers()
    yield
    reset_brokers()


def make_doc(seed: int, length: int = 64) -> bytes:
    rng = random.Random(seed)
    return struct.pack(f"<{length}d", *[rng.uniform(-1, 1) for _ in range(length)])


OPS = (("normalize",), ("remove_noise", 3))
EXTRACTORS = (("energy", 4), ("min_max",))


def make_config() -> PipelineConfig:
    ts = empty_training_set()
    for cid, base in ((1, 300), (2, 400)):
        for offset in range(2):
            sample = load_sample(make_doc(base + offset), "raw-f64")
            ts = train(ts, cid, extract_features(preprocess(sample, OPS), EXTRACTORS))
    return PipelineConfig("raw-f64", OPS, EXTRACTORS, ts)


def wait_for_event(runtime, kind: str, timeout_s: float = 10.0):
    import time

    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        hits = [e for e in runtime.gmt.events_since(0) if e["event"] == kind]
        if hits:
            return hits
        time.sleep(0.05)
    return []


class TestHealingSupervisor:
    def _runtime(self):
        rt = GipsyRuntime(
            beat_interval_ms=50, sweep_ms=50, announce_age_ms=300, poll_ms=50
        )
        functions = pipeline_worker_functions()
        others = {k: v for k, v in functions.items() if k != "marf.preprocess"}
        solo = {"marf.preprocess": functions["marf.preprocess"]}

        n1 = rt.add_node("n1")
        n2 = rt.add_node("n2")
        rt.allocate(n1, "DST")
        rt.allocate(n1, "DGT")
        rt.allocate(n1, "DWT", others)
        active = rt.allocate(n2, "DWT", solo)
        standby = rt.allocate(n1, "DWT", solo, start=False)
        rt.start()
        return rt, active, standby

    def test_promotion_after_node_loss(self):
        rt, active, standby = self._runtime()
        try:
            plan = ReplicaPlan({"marf.preprocess": StageRoutes({active}, [standby])})
            HealingSupervisor(rt, plan)
            config = make_config()
            client = PipelineClient(rt.new_client(), config, timeout_ms=20_000)

            first = client.process_document(make_doc(1))
            assert first == run_local(config, make_doc(1))

            rt.kill_node("n2")
            assert wait_for_event(rt, "healing_action")

            second = client.process_document(make_doc(2))
            assert result_set_to_bytes(second) == result_set_to_bytes(
                run_local(config, make_doc(2))
            )
            healings = [
                e for e in rt.gmt.events_since(0) if e["event"] == "healing_action"
            ]
            assert len(healings) == 1
            assert healings[0]["promoted"] == standby
            assert plan.stages["marf.preprocess"].active == {standby}
        finally:
            rt.stop()

    def test_alert_when_no_standby(self):
        rt, active, standby = self._runtime()
        try:
            plan = ReplicaPlan({"marf.preprocess": StageRoutes({active}, [])})
            HealingSupervisor(rt, plan)
            rt.kill_node("n2")
            alerts = wait_for_event(rt, "critical_alert")
            assert alerts
            assert alerts[0]["reason"] == "no_standby_available"
            assert not [
                e for e in rt.gmt.events_since(0) if e["event"] == "healing_action"
            ]
        finally:
            rt.stop()
