"""Queue semantics over the in-process broker: rotation, redelivery,
exclusive mode, request/reply, and registry-based failover."""
import hashlib
import threading
import time

import pytest

from eduction_rt.transport import (
    KEY_HEARTBEAT,
    KEY_IMPLEMENTATION,
    KEY_PRIMARY,
    KEY_SECONDARY,
    KEY_SECRET,
    AllBrokersDown,
    BrokerCore,
    EnvelopeKind,
    ExclusiveConflict,
    InprocAgent,
    InprocBroker,
    MissingProperty,
    NotSubscribed,
    Timeout,
    TransportEnvelope,
    UnknownImplementation,
    create_agent,
    encode_frame,
    reset_brokers,
    unwrap_rpc,
)


@pytest.fixture(autouse=True)
def clean_registry():
    reset_brokers()
    yield
    reset_brokers()


def envelope(payload: bytes, kind=EnvelopeKind.DEMAND) -> TransportEnvelope:
    return TransportEnvelope(kind, hashlib.sha256(payload).digest(), payload)


def config(primary="default", secondary=None, key="shared-secret"):
    cfg = {
        KEY_IMPLEMENTATION: "inproc",
        KEY_PRIMARY: primary,
        KEY_SECRET: key,
        KEY_HEARTBEAT: "100",
    }
    if secondary is not None:
        cfg[KEY_SECONDARY] = secondary
    return cfg


class TestCoreRotation:
    def test_two_consumers_alternate(self):
        core = BrokerCore()
        core.subscribe("q", "A")
        core.subscribe("q", "B")
        for i in range(4):
            core.publish("q", b"m%d" % i)
        a = [core.fetch("q", "A", 0)[1] for _ in range(2)]
        b = [core.fetch("q", "B", 0)[1] for _ in range(2)]
        assert a == [b"m0", b"m2"]
        assert b == [b"m1", b"m3"]
        assert core.fetch("q", "A", 0) is None

    def test_single_consumer_sees_send_order(self):
        core = BrokerCore()
        core.subscribe("q", "A")
        frames = [b"f%d" % i for i in range(10)]
        for frame in frames:
            core.publish("q", frame)
        assert [core.fetch("q", "A", 0)[1] for _ in range(10)] == frames

    def test_strict_assignment_is_fair(self):
        core = BrokerCore()
        consumers = ["c%d" % i for i in range(4)]
        for consumer in consumers:
            core.subscribe("work", consumer)
        for i in range(100):
            core.publish("work", b"job%d" % i)
        counts = {}
        for consumer in consumers:
            while core.fetch("work", consumer, 0) is not None:
                counts[consumer] = counts.get(consumer, 0) + 1
        assert counts == {consumer: 25 for consumer in consumers}

    def test_late_subscriber_drains_backlog(self):
        core = BrokerCore()
        core.publish("q", b"parked")  # durable queue parks with no consumers
        core.subscribe("q", "A")
        assert core.fetch("q", "A", 0)[1] == b"parked"


class TestRedelivery:
    def test_unacked_frames_go_to_survivor(self):
        core = BrokerCore()
        core.subscribe("q", "A")
        core.subscribe("q", "B")
        core.publish("q", b"one")
        delivery_id, frame = core.fetch("q", "A", 0)
        assert frame == b"one"
        core.drop_consumer("A")  # died holding the unacked frame
        redelivered = core.fetch("q", "B", 100)
        assert redelivered is not None and redelivered[1] == b"one"

    def test_acked_frames_stay_gone(self):
        core = BrokerCore()
        core.subscribe("q", "A")
        core.subscribe("q", "B")
        core.publish("q", b"one")
        delivery_id, _ = core.fetch("q", "A", 0)
        assert core.ack("q", "A", delivery_id)
        core.drop_consumer("A")
        assert core.fetch("q", "B", 0) is None

    def test_requeue_preserves_original_order(self):
        core = BrokerCore()
        core.subscribe("q", "A")
        for i in range(4):
            core.publish("q", b"m%d" % i)
        core.fetch("q", "A", 0)  # m0 now unacked, m1..m3 still assigned
        core.subscribe("q", "B")
        core.drop_consumer("A")
        got = [core.fetch("q", "B", 0)[1] for _ in range(4)]
        assert got == [b"m0", b"m1", b"m2", b"m3"]


class TestQueueModes:
    def test_exclusive_rejects_second_consumer(self):
        core = BrokerCore()
        core.subscribe("q", "A", exclusive=True)
        with pytest.raises(ExclusiveConflict):
            core.subscribe("q", "B")

    def test_second_exclusive_on_shared_queue_rejected(self):
        core = BrokerCore()
        core.subscribe("q", "A")
        with pytest.raises(ExclusiveConflict):
            core.subscribe("q", "B", exclusive=True)

    def test_mode_resets_when_queue_empties(self):
        core = BrokerCore()
        core.subscribe("q", "A", exclusive=True)
        core.unsubscribe("q", "A")
        core.subscribe("q", "B")
        core.subscribe("q", "C")  # no conflict: exclusivity left with A

    def test_transient_queue_drops_without_consumers(self):
        core = BrokerCore()
        assert core.publish("_events", b"gone") is None
        core.subscribe("_events", "A")
        assert core.publish("_events", b"kept") is not None
        assert core.fetch("_events", "A", 0)[1] == b"kept"

    def test_transient_state_vanishes_with_last_consumer(self):
        core = BrokerCore()
        core.subscribe("_events", "A")
        core.publish("_events", b"pending")
        core.unsubscribe("_events", "A")
        core.subscribe("_events", "A")
        assert core.fetch("_events", "A", 0) is None


class TestAgentBasics:
    def test_send_receive_round_trip(self):
        InprocBroker("default")
        agent = create_agent(config(), "a1")
        agent.subscribe("q.data", "c1")
        sent = envelope(b"payload-bytes")
        agent.send("q.data", sent)
        got = agent.receive("q.data", "c1", timeout_ms=1000)
        assert got == sent
        agent.ack("q.data", "c1", got)

    def test_receive_without_subscription(self):
        InprocBroker("default")
        agent = create_agent(config(), "a1")
        with pytest.raises(NotSubscribed):
            agent.receive("q.none", "c1", timeout_ms=10)

    def test_receive_timeout_returns_none(self):
        InprocBroker("default")
        agent = create_agent(config(), "a1")
        agent.subscribe("q.idle", "c1")
        assert agent.receive("q.idle", "c1", timeout_ms=30) is None

    def test_mac_mismatch_counted_and_skipped(self):
        broker = InprocBroker("default")
        agent = create_agent(config(), "a1")
        agent.subscribe("q.sec", "c1")
        bad = bytearray(encode_frame(envelope(b"tampered"), b"wrong-key"))
        broker.core.publish("q.sec", bytes(bad))
        agent.send("q.sec", envelope(b"good"))
        got = agent.receive("q.sec", "c1", timeout_ms=1000)
        assert got is not None and got.payload == b"good"
        assert agent.insecure_rejected == 1


class TestSyncCall:
    def run_responder(self, agent, queue, stop, transform=lambda data: data + b"!"):
        agent.subscribe(queue, "responder")
        while not stop.is_set():
            request = agent.receive(queue, "responder", timeout_ms=50)
            if request is None:
                continue
            reply_queue, inner = unwrap_rpc(request.payload)
            agent.ack(queue, "responder", request)
            if reply_queue:
                agent.reply_to(request, reply_queue, transform(inner))

    def test_echo_round_trip(self):
        InprocBroker("default")
        caller = create_agent(config(), "caller")
        responder = create_agent(config(), "responder")
        stop = threading.Event()
        thread = threading.Thread(
            target=self.run_responder, args=(responder, "q.rpc", stop), daemon=True
        )
        thread.start()
        try:
            request = envelope(b"ping")
            reply = caller.sync_call("q.rpc", request, timeout_ms=3000)
            assert reply.kind is EnvelopeKind.RESULT
            assert reply.signature == request.signature
            assert reply.payload == b"ping!"
        finally:
            stop.set()
            thread.join(timeout=2)

    def test_timeout_without_responder(self):
        InprocBroker("default")
        caller = create_agent(config(), "caller")
        started = time.monotonic()
        with pytest.raises(Timeout):
            caller.sync_call("q.silent", envelope(b"?"), timeout_ms=300)
        elapsed = time.monotonic() - started
        assert 0.25 <= elapsed < 2.0

    def test_survives_broker_kill_mid_call(self):
        primary = InprocBroker("bus-a")
        InprocBroker("bus-b")
        cfg = config(primary="bus-a", secondary="bus-b")
        caller = create_agent(cfg, "caller")
        responder = create_agent(cfg, "responder")
        stop = threading.Event()

        def slow_append(data):
            time.sleep(0.4)  # keep the call in flight while the broker dies
            return data + b"!"

        thread = threading.Thread(
            target=self.run_responder,
            args=(responder, "q.rpc", stop, slow_append),
            daemon=True,
        )
        thread.start()
        killer = threading.Timer(0.05, primary.kill)
        killer.start()
        try:
            reply = caller.sync_call("q.rpc", envelope(b"hold"), timeout_ms=8000)
            assert reply.payload == b"hold!"
            assert caller.failover_probe() == "secondary"
        finally:
            stop.set()
            killer.cancel()
            thread.join(timeout=2)


class TestFailover:
    def test_binding_moves_to_secondary(self):
        primary = InprocBroker("bus-a")
        InprocBroker("bus-b")
        agent = create_agent(config(primary="bus-a", secondary="bus-b"), "a1")
        agent.subscribe("q.keep", "c1")
        assert agent.failover_probe() == "primary"
        primary.kill()
        agent.send("q.keep", envelope(b"after-kill"))
        assert agent.failover_probe() == "secondary"
        assert agent.failover_count == 1
        got = agent.receive("q.keep", "c1", timeout_ms=1000)
        assert got is not None and got.payload == b"after-kill"

    def test_all_brokers_down(self):
        primary = InprocBroker("bus-a")
        secondary = InprocBroker("bus-b")
        agent = create_agent(config(primary="bus-a", secondary="bus-b"), "a1")
        primary.kill()
        secondary.kill()
        with pytest.raises(AllBrokersDown):
            agent.send("q.any", envelope(b"x"))

    def test_no_secondary_configured(self):
        broker = InprocBroker("bus-a")
        agent = create_agent(config(primary="bus-a"), "a1")
        broker.kill()
        with pytest.raises(AllBrokersDown):
            agent.send("q.any", envelope(b"x"))


class TestFactory:
    def test_inproc_selector(self):
        agent = create_agent(config())
        assert isinstance(agent, InprocAgent)

    def test_unknown_selector_carries_value(self):
        with pytest.raises(UnknownImplementation) as info:
            create_agent({KEY_IMPLEMENTATION: "bogus"})
        assert info.value.value == "bogus"

    def test_missing_selector(self):
        with pytest.raises(MissingProperty) as info:
            create_agent({})
        assert info.value.key == KEY_IMPLEMENTATION

    def test_tcp_without_primary_address(self):
        with pytest.raises(MissingProperty) as info:
            create_agent({KEY_IMPLEMENTATION: "tcp-broker"})
        assert info.value.key == KEY_PRIMARY
