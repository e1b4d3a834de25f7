import hashlib
import json
import threading

import pytest

from urgentcp.broker import Broker
from urgentcp.errors import AlreadyRegistered, UnknownSensorType
from urgentcp.sensors import SensorGateway, SensorTypeConfig
from urgentcp.store import StateStore

from conftest import wait_until


@pytest.fixture
def rig(tmp_path):
    store = StateStore(tmp_path / "state")
    broker = Broker()
    triggers = []
    arrivals = []
    gateway = SensorGateway(store, broker,
                            trigger=lambda t, meta: triggers.append((t, meta)),
                            on_arrival=lambda env: arrivals.append(env))
    gateway.register_type(SensorTypeConfig(sensor_type="hotspot", mode="PUSH"))

    class Rig:
        pass

    r = Rig()
    r.store, r.broker, r.gateway = store, broker, gateway
    r.triggers, r.arrivals = triggers, arrivals
    yield r
    broker.close()
    store.close()


class TestPush:
    def test_envelope_routed_with_matching_digest(self, rig):
        payload = b"satellite frame"
        rig.gateway.ingest_push("hotspot", "sat-7", payload)
        assert rig.broker.queue_depth("sensor.hotspot") == 1
        got = []
        done = threading.Event()

        def handler(envelope):
            got.append(envelope)
            done.set()

        rig.gateway.register_consumer("hotspot", handler)
        assert done.wait(5)
        envelope = got[0]
        assert envelope["meta"]["content_sha256"] == \
            hashlib.sha256(payload).hexdigest()
        assert rig.store.get_object(envelope["payload_uri"]) == payload

    def test_unknown_type_rejected(self, rig):
        with pytest.raises(UnknownSensorType):
            rig.gateway.ingest_push("unknown", "s", b"x")

    def test_arrival_hook_fires_at_ingest(self, rig):
        rig.gateway.ingest_push("hotspot", "sat-7", b"data")
        assert len(rig.arrivals) == 1
        assert rig.arrivals[0]["sensor_type"] == "hotspot"

    def test_payload_not_inline_in_message(self, rig):
        payload = b"A" * 4096
        rig.gateway.ingest_push("hotspot", "sat-7", payload)
        captured = []
        done = threading.Event()
        rig.broker.consume("sensor.hotspot",
                           lambda m: (captured.append(m), done.set()))
        assert done.wait(5)
        assert payload not in captured[0].payload
        assert len(captured[0].payload) < 1024

    def test_backlog_queues_without_loss(self, rig):
        for i in range(200):
            rig.gateway.ingest_push("hotspot", "sat-7", str(i).encode())
        assert rig.broker.queue_depth("sensor.hotspot") == 200
        seen = []
        done = threading.Event()

        def slow_handler(envelope):
            seen.append(envelope["envelope_id"])
            if len(seen) == 200:
                done.set()

        rig.gateway.register_consumer("hotspot", slow_handler)
        assert done.wait(20)
        assert len(set(seen)) == 200
        assert rig.broker.queue_depth("sensor.hotspot") == 0


class TestConsumers:
    def test_trigger_emitted_after_ack(self, rig):
        rig.gateway.register_consumer("hotspot", lambda env: None)
        envelope_id = rig.gateway.ingest_push("hotspot", "sat-7", b"x")
        wait_until(lambda: rig.triggers, message="trigger emission")
        sensor_type, meta = rig.triggers[0]
        assert sensor_type == "hotspot"
        assert meta["envelope"] == envelope_id
        assert meta["sha256"] == hashlib.sha256(b"x").hexdigest()

    def test_failing_handler_dead_letters_after_five(self, rig):
        def bad_handler(envelope):
            raise RuntimeError("cannot process")

        rig.gateway.register_consumer("hotspot", bad_handler)
        rig.gateway.ingest_push("hotspot", "sat-7", b"x")
        wait_until(lambda: "sensor.hotspot.dead" in rig.broker._queues and
                   rig.broker.queue_depth("sensor.hotspot.dead") == 1,
                   message="dead letter")
        assert rig.triggers == []

    def test_duplicate_exclusive_registration(self, rig):
        rig.gateway.register_consumer("hotspot", lambda env: None)
        with pytest.raises(AlreadyRegistered):
            rig.gateway.register_consumer("hotspot", lambda env: None)

    def test_nonexclusive_consumers_split_work(self, rig):
        logs = ([], [])
        done = threading.Event()
        lock = threading.Lock()

        def make(i):
            def handler(envelope):
                with lock:
                    logs[i].append(envelope["envelope_id"])
                    if len(logs[0]) + len(logs[1]) == 6:
                        done.set()
            return handler

        rig.gateway.register_consumer("hotspot", make(0), exclusive=False)
        rig.gateway.register_consumer("hotspot", make(1), exclusive=False)
        ids = {rig.gateway.ingest_push("hotspot", "sat", str(i).encode())
               for i in range(6)}
        assert done.wait(10)
        assert set(logs[0]) | set(logs[1]) == ids
        assert not (set(logs[0]) & set(logs[1]))

    def test_consumer_for_unregistered_type(self, rig):
        with pytest.raises(UnknownSensorType):
            rig.gateway.register_consumer("nope", lambda env: None)


class TestPull:
    def _pull_rig(self, rig, responses):
        calls = {"n": 0}

        def fetcher(url):
            value = responses[min(calls["n"], len(responses) - 1)]
            calls["n"] += 1
            if isinstance(value, Exception):
                raise value
            return value

        rig.gateway.fetcher = fetcher
        rig.gateway.register_type(SensorTypeConfig(
            sensor_type="weather", mode="PULL",
            pull_url="http://example/w.json", pull_interval_s=60))
        return calls

    def test_new_content_ingested(self, rig):
        self._pull_rig(rig, [b"v1"])
        assert len(rig.gateway.poll_pull_sources(now=0)) == 1
        assert rig.broker.queue_depth("sensor.weather") == 1

    def test_unchanged_content_skipped(self, rig):
        self._pull_rig(rig, [b"same", b"same"])
        assert len(rig.gateway.poll_pull_sources(now=0)) == 1
        assert len(rig.gateway.poll_pull_sources(now=100)) == 0

    def test_changed_content_reingested(self, rig):
        self._pull_rig(rig, [b"v1", b"v2"])
        rig.gateway.poll_pull_sources(now=0)
        assert len(rig.gateway.poll_pull_sources(now=100)) == 1

    def test_interval_respected(self, rig):
        calls = self._pull_rig(rig, [b"v1", b"v2"])
        rig.gateway.poll_pull_sources(now=0)
        rig.gateway.poll_pull_sources(now=30)  # too soon
        assert calls["n"] == 1

    def test_fetch_failure_counted_not_raised(self, rig):
        self._pull_rig(rig, [ConnectionError("down")])
        assert rig.gateway.poll_pull_sources(now=0) == []
        assert rig.gateway.failure_counts["weather"] == 1

    def test_pull_config_validation(self):
        with pytest.raises(Exception):
            SensorTypeConfig(sensor_type="x", mode="PULL").validate()

    def test_geolocation_metadata(self, rig):
        rig.gateway.ingest_push("hotspot", "sat-7", b"x", geolocation=(42.1, 9.0))
        captured = []
        done = threading.Event()
        rig.broker.consume("sensor.hotspot",
                           lambda m: (captured.append(m), done.set()))
        assert done.wait(5)
        envelope = json.loads(captured[0].payload)
        assert envelope["meta"]["geolocation"] == {"lat": 42.1, "lon": 9.0}
