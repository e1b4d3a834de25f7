"""Sensor ingest: push and pull paths onto per-type broker queues.

Raw payloads go straight into the "sensors" object store; only a
standardized metadata envelope travels through the queues, so consumers
and workflows deal with handles, never bulk data.  No payload format
conversion happens here - standardization applies to metadata only.
"""

import hashlib
import json
import time
import uuid
from dataclasses import dataclass

import httpx

from .broker import Broker
from .errors import AlreadyRegistered, InvalidArgument, UnknownSensorType
from .store import StateStore, now_s


@dataclass
class SensorTypeConfig:
    sensor_type: str
    mode: str = "PUSH"  # PUSH | PULL
    pull_url: str | None = None
    pull_interval_s: int | None = None

    @property
    def queue(self) -> str:
        return f"sensor.{self.sensor_type}"

    def validate(self):
        if self.mode not in ("PUSH", "PULL"):
            raise InvalidArgument(f"bad sensor mode {self.mode!r}")
        if self.mode == "PULL":
            if not self.pull_url or not self.pull_interval_s or self.pull_interval_s < 1:
                raise InvalidArgument(
                    f"PULL sensor {self.sensor_type!r} needs pull_url and pull_interval_s")


def _http_fetch(url: str) -> bytes:
    return httpx.get(url, timeout=10.0).raise_for_status().content


class SensorGateway:
    def __init__(self, store: StateStore, broker: Broker, trigger=None,
                 on_arrival=None, fetcher=None):
        """``trigger(sensor_type, envelope_meta)`` runs after a consumer acks
        an envelope; ``on_arrival(envelope)`` fires at ingest time."""
        self.store = store
        self.broker = broker
        self.trigger = trigger
        self.on_arrival = on_arrival
        self.fetcher = fetcher or _http_fetch
        self.types: dict[str, SensorTypeConfig] = {}
        self.failure_counts: dict[str, int] = {}
        self._exclusive: set[str] = set()
        self._last_pull: dict[str, float] = {}

    def register_type(self, config: SensorTypeConfig):
        config.validate()
        self.types[config.sensor_type] = config
        self.broker.declare_queue(config.queue, durable=True)

    def _ingest(self, config: SensorTypeConfig, source_id, payload: bytes,
                geolocation=None) -> str:
        envelope_id = "env-" + uuid.uuid4().hex[:12]
        digest = hashlib.sha256(payload).hexdigest()
        key = f"{config.sensor_type}/{source_id}/{envelope_id}"
        handle = self.store.put_object("sensors", key, payload)
        meta = {"type": config.sensor_type, "timestamp": now_s(),
                "content_sha256": digest}
        if geolocation is not None:
            meta["geolocation"] = {"lat": geolocation[0], "lon": geolocation[1]}
        envelope = {"envelope_id": envelope_id, "sensor_type": config.sensor_type,
                    "source_id": source_id, "received_at": meta["timestamp"],
                    "payload_uri": handle.uri, "meta": meta}
        self.broker.publish(config.queue,
                            json.dumps(envelope, sort_keys=True).encode(),
                            {"sensor-type": config.sensor_type})
        if self.on_arrival:
            self.on_arrival(envelope)
        return envelope_id

    def ingest_push(self, sensor_type, source_id, payload: bytes,
                    geolocation=None) -> str:
        """Accept one pushed observation; rejected (not dead-lettered) when
        the type is unregistered so the caller can correct and resend."""
        config = self.types.get(sensor_type)
        if config is None or config.mode != "PUSH":
            raise UnknownSensorType(f"no PUSH sensor type {sensor_type!r} registered")
        return self._ingest(config, source_id, payload, geolocation)

    def poll_pull_sources(self, now=None) -> list[str]:
        """Fetch every due PULL source; ingest only when content changed.

        Fetch failures are counted per source, never raised: an unreachable
        sensor is data, not an error.
        """
        now = now if now is not None else time.monotonic()
        ingested = []
        for config in self.types.values():
            if config.mode != "PULL":
                continue
            last = self._last_pull.get(config.sensor_type)
            if last is not None and now - last < config.pull_interval_s:
                continue
            self._last_pull[config.sensor_type] = now
            try:
                payload = self.fetcher(config.pull_url)
            except Exception:
                key = config.sensor_type
                self.failure_counts[key] = self.failure_counts.get(key, 0) + 1
                continue
            digest = hashlib.sha256(payload).hexdigest()
            kv_key = f"sensor.pull.digest.{config.sensor_type}"
            if self.store.kv_get(kv_key) == digest:
                continue  # unchanged since last poll
            self.store.kv_set(kv_key, digest)
            ingested.append(self._ingest(config, "pull", payload))
        return ingested

    def register_consumer(self, sensor_type, handler, exclusive=True,
                          prefetch=1) -> str:
        """Attach a type-specific consumer to the sensor's queue.

        On handler success the envelope is acked and the workflow trigger
        fires; on failure the broker's redelivery/dead-letter policy applies.
        """
        config = self.types.get(sensor_type)
        if config is None:
            raise UnknownSensorType(f"sensor type {sensor_type!r} not registered")
        if exclusive:
            if sensor_type in self._exclusive:
                raise AlreadyRegistered(
                    f"sensor type {sensor_type!r} already has an exclusive consumer")
            self._exclusive.add(sensor_type)

        def consume(msg):
            envelope = json.loads(msg.payload)
            handler(envelope)
            self.broker.ack(msg.message_id)
            if self.trigger is not None:
                self.trigger(sensor_type, {
                    "envelope": envelope["envelope_id"],
                    "type": envelope["sensor_type"],
                    "source": envelope["source_id"],
                    "payload_uri": envelope["payload_uri"],
                    "sha256": envelope["meta"]["content_sha256"],
                })
        return self.broker.consume(config.queue, consume, prefetch=prefetch)
