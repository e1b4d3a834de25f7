import random
import struct
import tempfile
import threading
import time
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urgentcp.broker import MAX_DELIVERIES, Broker
from urgentcp.errors import (DeclMismatch, InvalidAck, InvalidArgument,
                             NotFound, RecoveryError, RpcTimeout)

from conftest import wait_until


@pytest.fixture
def broker():
    b = Broker()
    yield b
    b.close()


@pytest.fixture
def durable_broker(tmp_path):
    b = Broker(tmp_path / "queues")
    yield b
    b.close()


def drain(b, queue, count, timeout=10.0, ack=True):
    """Consume exactly `count` messages, acking each; later deliveries are
    left unacked.  Returns the messages in delivery order."""
    got = []
    done = threading.Event()

    def handler(msg):
        if len(got) >= count:
            return
        got.append(msg)
        if ack:
            b.ack(msg.message_id)
        if len(got) >= count:
            done.set()

    b.consume(queue, handler, prefetch=1)
    assert done.wait(timeout), f"only {len(got)}/{count} delivered"
    return got


class TestDeclare:
    def test_idempotent(self, broker):
        d1 = broker.declare_queue("sensor.hotspot", True)
        d2 = broker.declare_queue("sensor.hotspot", True)
        assert d1 == d2

    def test_property_mismatch(self, broker):
        broker.declare_queue("sensor.hotspot", True)
        with pytest.raises(DeclMismatch):
            broker.declare_queue("sensor.hotspot", False)

    def test_name_grammar(self, broker):
        with pytest.raises(InvalidArgument):
            broker.declare_queue("Bad Name!", True)

    def test_publish_to_undeclared(self, broker):
        with pytest.raises(NotFound):
            broker.publish("nope", b"x")


class TestDelivery:
    def test_single_consumer_fifo(self, broker):
        broker.declare_queue("q", False)
        for i in range(3):
            broker.publish("q", f"m{i}".encode())
        got = drain(broker, "q", 3)
        assert [m.payload for m in got] == [b"m0", b"m1", b"m2"]

    def test_competing_consumers_exactly_once(self, broker):
        broker.declare_queue("q", False)
        ids = {broker.publish("q", str(i).encode()) for i in range(4)}
        logs = [[], []]
        done = threading.Event()
        lock = threading.Lock()

        def make(i):
            def handler(msg):
                with lock:
                    logs[i].append(msg.message_id)
                    total = len(logs[0]) + len(logs[1])
                broker.ack(msg.message_id)
                if total >= 4:
                    done.set()
            return handler

        broker.consume("q", make(0), prefetch=1)
        broker.consume("q", make(1), prefetch=1)
        assert done.wait(5)
        assert set(logs[0]) | set(logs[1]) == ids
        assert not (set(logs[0]) & set(logs[1]))

    def test_prefetch_limits_outstanding(self, broker):
        broker.declare_queue("q", False)
        for i in range(4):
            broker.publish("q", str(i).encode())
        delivered = []
        broker.consume("q", lambda m: delivered.append(m), prefetch=1)
        time.sleep(0.3)
        assert len(delivered) == 1
        assert broker.queue_depth("q") == 3

    def test_nack_redelivers_with_incremented_count(self, broker):
        broker.declare_queue("q", False)
        broker.publish("q", b"m1")
        counts = []
        done = threading.Event()

        def handler(msg):
            counts.append(msg.delivery_count)
            if len(counts) == 1:
                broker.nack(msg.message_id, requeue=True)
            else:
                broker.ack(msg.message_id)
                done.set()

        broker.consume("q", handler)
        assert done.wait(5)
        assert counts == [1, 2]

    def test_nack_requeues_at_head(self, broker):
        broker.declare_queue("q", False)
        broker.publish("q", b"first")
        broker.publish("q", b"second")
        order = []
        done = threading.Event()

        def handler(msg):
            order.append(msg.payload)
            if msg.payload == b"first" and msg.delivery_count == 1:
                broker.nack(msg.message_id, requeue=True)
            else:
                broker.ack(msg.message_id)
            if len(order) == 3:
                done.set()

        broker.consume("q", handler, prefetch=1)
        assert done.wait(5)
        assert order == [b"first", b"first", b"second"]

    def test_handler_exception_takes_redelivery_path(self, broker):
        broker.declare_queue("q", False)
        broker.publish("q", b"x")
        attempts = []
        done = threading.Event()

        def handler(msg):
            attempts.append(msg.delivery_count)
            if len(attempts) == 1:
                raise RuntimeError("boom")
            broker.ack(msg.message_id)
            done.set()

        broker.consume("q", handler)
        assert done.wait(5)
        assert attempts == [1, 2]

    def test_dead_letter_after_max_deliveries(self, broker):
        broker.declare_queue("q", False)
        broker.publish("q", b"poison")
        seen = []

        def handler(msg):
            seen.append(msg.delivery_count)
            raise RuntimeError("always fails")

        broker.consume("q", handler)
        wait_until(lambda: broker._queues.get("q.dead") and
                   broker.queue_depth("q.dead") == 1, timeout=10,
                   message="dead letter")
        assert seen == list(range(1, MAX_DELIVERIES + 1))

    def test_explicit_dead_letter(self, broker):
        broker.declare_queue("q", False)
        broker.publish("q", b"x")
        broker.consume("q", lambda m: broker.nack(m.message_id, requeue=False))
        wait_until(lambda: "q.dead" in broker._queues and
                   broker.queue_depth("q.dead") == 1, message="dead queue")

    def test_double_ack_rejected(self, broker):
        broker.declare_queue("q", False)
        broker.publish("q", b"m1")
        failures = []
        done = threading.Event()

        def handler(msg):
            broker.ack(msg.message_id)
            try:
                broker.ack(msg.message_id)
            except InvalidAck as exc:
                failures.append(exc)
            done.set()

        broker.consume("q", handler)
        assert done.wait(5)
        assert len(failures) == 1


class TestConservation:
    def test_published_equals_acked_plus_pending_plus_unacked_plus_dead(self, broker):
        rng = random.Random(7)
        broker.declare_queue("q", False)
        n = 60
        processed = threading.Event()
        outcomes = {"acked": 0, "dead": 0, "held": 0}
        lock = threading.Lock()

        def handler(msg):
            choice = rng.random()
            with lock:
                if choice < 0.5:
                    broker.ack(msg.message_id)
                    outcomes["acked"] += 1
                elif choice < 0.7:
                    broker.nack(msg.message_id, requeue=False)
                    outcomes["dead"] += 1
                else:
                    outcomes["held"] += 1  # leave unacked
                total = sum(outcomes.values())
            if total >= 40:
                processed.set()

        for i in range(n):
            broker.publish("q", str(i).encode())
        broker.consume("q", handler, prefetch=50)
        assert processed.wait(10)
        time.sleep(0.3)
        in_queue = broker.queue_depth("q")
        dead = broker.queue_depth("q.dead") if "q.dead" in broker._queues else 0
        stats = broker.stats
        assert n == stats["acked"] + in_queue + stats["unacked"] + dead


class TestRpc:
    def test_echo(self, broker):
        broker.declare_queue("svc.echo", False)
        broker.serve_rpc("svc.echo", lambda p: p)
        assert broker.rpc_call("svc.echo", b"payload", 5) == b"payload"

    def test_timeout(self, broker):
        broker.declare_queue("svc.silent", False)
        t0 = time.monotonic()
        with pytest.raises(RpcTimeout):
            broker.rpc_call("svc.silent", b"x", 0.5)
        assert 0.4 < time.monotonic() - t0 < 3.0

    def test_concurrent_calls_route_by_correlation(self, broker):
        broker.declare_queue("svc.double", False)
        broker.serve_rpc("svc.double", lambda p: p * 2, prefetch=2)
        results = {}

        def call(payload):
            results[payload] = broker.rpc_call("svc.double", payload, 5)

        threads = [threading.Thread(target=call, args=(p,))
                   for p in (b"a", b"b")]
        for t in threads:
            t.start()
        for t in threads:
            t.join(5)
        assert results == {b"a": b"aa", b"b": b"bb"}


class TestDurability:
    def test_publish_crash_recover_delivers(self, tmp_path):
        b = Broker(tmp_path / "q")
        b.declare_queue("work", True)
        b.publish("work", b"survive-me")
        b.close()
        b2 = Broker(tmp_path / "q")
        got = drain(b2, "work", 1)
        assert got[0].payload == b"survive-me"
        b2.close()

    def test_acked_never_redelivered(self, tmp_path):
        b = Broker(tmp_path / "q")
        b.declare_queue("work", True)
        b.publish("work", b"m1")
        b.publish("work", b"m2")
        got = drain(b, "work", 1)
        assert got[0].payload == b"m1"
        b.close()
        b2 = Broker(tmp_path / "q")
        assert b2.queue_depth("work") == 1
        got = drain(b2, "work", 1)
        assert got[0].payload == b"m2"
        b2.close()

    def test_empty_log_recovers_empty(self, tmp_path):
        b = Broker(tmp_path / "q")
        b.declare_queue("work", True)
        b.close()
        b2 = Broker(tmp_path / "q")
        assert b2.queue_depth("work") == 0
        b2.close()

    def test_unacked_at_crash_redelivered_with_count(self, tmp_path):
        b = Broker(tmp_path / "q")
        b.declare_queue("work", True)
        b.publish("work", b"m1")
        delivered = threading.Event()
        b.consume("work", lambda m: delivered.set(), prefetch=1)  # never acks
        assert delivered.wait(5)
        b.close()
        b2 = Broker(tmp_path / "q")
        got = drain(b2, "work", 1)
        assert got[0].payload == b"m1"
        assert got[0].delivery_count == 2
        b2.close()

    def test_truncated_log_raises_with_offset_and_keeps_prefix(self, tmp_path):
        b = Broker(tmp_path / "q")
        b.declare_queue("work", True)
        b.publish("work", b"good")
        b.publish("work", b"will-be-cut")
        b.close()
        log_path = tmp_path / "q" / "work.qlog"
        data = log_path.read_bytes()
        log_path.write_bytes(data[:-3])  # cut into the final record
        with pytest.raises(RecoveryError) as err:
            Broker(tmp_path / "q")
        assert err.value.queue == "work"
        assert 0 < err.value.offset < len(data)
        # the log was truncated at the corruption point; a reopen is clean
        b3 = Broker(tmp_path / "q")
        got = drain(b3, "work", 1)
        assert got[0].payload == b"good"
        b3.close()

    def test_crc_corruption_detected(self, tmp_path):
        b = Broker(tmp_path / "q")
        b.declare_queue("work", True)
        b.publish("work", b"payload")
        b.close()
        log_path = tmp_path / "q" / "work.qlog"
        data = bytearray(log_path.read_bytes())
        data[-6] ^= 0xFF  # flip a byte inside the last record body
        log_path.write_bytes(bytes(data))
        with pytest.raises(RecoveryError):
            Broker(tmp_path / "q")


class TestFifoProperty:
    @given(st.lists(st.binary(min_size=0, max_size=24), min_size=1, max_size=15))
    @settings(max_examples=40, deadline=None)
    def test_serial_consumer_sees_publish_order(self, payloads):
        b = Broker()
        b.declare_queue("q", False)
        for p in payloads:
            b.publish("q", p)
        got = drain(b, "q", len(payloads))
        assert [m.payload for m in got] == payloads
        b.close()
