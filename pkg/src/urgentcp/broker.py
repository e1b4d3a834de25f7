"""Durable in-process message broker.

Named FIFO queues with competing consumers, explicit acknowledgements with
redelivery, reply-to RPC, and crash recovery.  The interface mirrors the
AMQP producer/queue/consumer model so an external broker daemon could be
substituted later; keeping it in-process makes durability semantics
directly testable.

Each durable queue persists to one append-only log file ``<queue>.qlog``
under the broker's data directory.  Records are length-prefixed::

    [u32 length][payload bytes][u32 crc32-of-payload]

(big-endian integers; the payload is a JSON event).  A CRC mismatch or a
truncated record defines corruption: recovery keeps everything before the
bad offset, truncates the file there, and raises RecoveryError.

Redelivered messages return to the *head* of their queue so a transient
consumer failure does not reorder work.  A message nacked after its fifth
delivery attempt is moved to ``<queue>.dead`` instead of being requeued,
bounding poison-message retries.
"""

import base64
import json
import os
import re
import struct
import threading
import time
import uuid
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DeclMismatch, InvalidAck, InvalidArgument, NotFound, RecoveryError, RpcTimeout

MAX_DELIVERIES = 5
_QUEUE_NAME_RE = re.compile(r"^[a-z0-9._-]+$")

REPLY_TO = "reply-to"
CORRELATION_ID = "correlation-id"


@dataclass
class Message:
    message_id: str
    queue: str
    payload: bytes
    headers: dict
    enqueued_at: int
    delivery_count: int = 0


@dataclass
class QueueDecl:
    name: str
    durable: bool


@dataclass
class _Queue:
    decl: QueueDecl
    pending: deque = field(default_factory=deque)
    consumers: list = field(default_factory=list)
    rr_next: int = 0
    log_file: object = None


class _Consumer:
    def __init__(self, broker, consumer_id, queue_name, handler, prefetch):
        self.broker = broker
        self.consumer_id = consumer_id
        self.queue_name = queue_name
        self.handler = handler
        self.prefetch = prefetch
        self.inbox = deque()
        self.unacked = 0
        self.cancelled = False
        self.thread = threading.Thread(
            target=self._run, name=f"consumer-{queue_name}-{consumer_id[:6]}", daemon=True)

    def _run(self):
        broker = self.broker
        while True:
            with broker._lock:
                while not self.inbox and not self.cancelled and not broker._closed:
                    broker._cond.wait()
                if self.cancelled or broker._closed:
                    return
                msg = self.inbox.popleft()
            try:
                self.handler(msg)
            except Exception:
                # Handler failure takes the standard redelivery path.
                try:
                    broker.nack(msg.message_id, requeue=True)
                except InvalidAck:
                    pass  # handler already acked/nacked before raising


class Broker:
    """In-process AMQP-style broker; see module docstring for semantics."""

    def __init__(self, data_dir=None, fsync=False):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queues: dict[str, _Queue] = {}
        self._messages: dict[str, Message] = {}
        self._unacked: dict[str, tuple[str, _Consumer, int]] = {}
        self._assign_seq = 0
        self._consumers: dict[str, _Consumer] = {}
        self._published = 0
        self._acked = 0
        self._closed = False
        self._fsync = fsync
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self.recover()

    # -- queue lifecycle ----------------------------------------------------

    def declare_queue(self, name, durable) -> QueueDecl:
        if not name or not _QUEUE_NAME_RE.match(name):
            raise InvalidArgument(f"bad queue name {name!r}")
        with self._lock:
            q = self._queues.get(name)
            if q is not None:
                if q.decl.durable != durable:
                    raise DeclMismatch(
                        f"queue {name!r} already declared with durable={q.decl.durable}")
                return q.decl
            q = _Queue(decl=QueueDecl(name, durable))
            self._queues[name] = q
            if durable and self.data_dir is not None:
                q.log_file = open(self._log_path(name), "ab")
                self._append(q, {"t": "decl", "name": name, "durable": durable})
            return q.decl

    def delete_queue(self, name):
        with self._lock:
            q = self._queues.pop(name, None)
            if q is None:
                return
            for consumer in list(q.consumers):
                consumer.cancelled = True
            for msg in q.pending:
                self._messages.pop(msg.message_id, None)
            if q.log_file is not None:
                q.log_file.close()
                self._log_path(name).unlink(missing_ok=True)
            self._cond.notify_all()

    def queue_depth(self, name) -> int:
        with self._lock:
            return len(self._require(name).pending)

    def unacked_count(self) -> int:
        with self._lock:
            return len(self._unacked)

    @property
    def stats(self) -> dict:
        with self._lock:
            return {"published": self._published, "acked": self._acked,
                    "unacked": len(self._unacked)}

    # -- publish / consume ----------------------------------------------------

    def publish(self, queue, payload: bytes, headers=None) -> str:
        headers = dict(headers or {})
        msg = Message(
            message_id=uuid.uuid4().hex, queue=queue, payload=bytes(payload),
            headers=headers, enqueued_at=int(time.time()))
        with self._lock:
            q = self._require(queue)
            self._append(q, {"t": "pub", "id": msg.message_id,
                             "p": base64.b64encode(msg.payload).decode(),
                             "h": headers, "at": msg.enqueued_at, "dc": 0})
            self._messages[msg.message_id] = msg
            q.pending.append(msg)
            self._published += 1
            self._dispatch(q)
        return msg.message_id

    def consume(self, queue, handler, prefetch=1) -> str:
        if prefetch < 1:
            raise InvalidArgument("prefetch must be >= 1")
        consumer_id = uuid.uuid4().hex
        with self._lock:
            q = self._require(queue)
            consumer = _Consumer(self, consumer_id, queue, handler, prefetch)
            q.consumers.append(consumer)
            self._consumers[consumer_id] = consumer
            consumer.thread.start()
            self._dispatch(q)
        return consumer_id

    def cancel_consumer(self, consumer_id):
        with self._lock:
            consumer = self._consumers.pop(consumer_id, None)
            if consumer is None:
                return
            consumer.cancelled = True
            q = self._queues.get(consumer.queue_name)
            if q is not None and consumer in q.consumers:
                q.consumers.remove(consumer)
            # Everything assigned to this consumer and still unacked goes
            # back to the head of the queue, preserving assignment order.
            stranded = sorted(
                ((seq, mid) for mid, (_, c, seq) in self._unacked.items() if c is consumer),
                reverse=True)
            for _, mid in stranded:
                self._unacked.pop(mid)
                if q is not None:
                    self._append(q, {"t": "nack", "id": mid, "rq": True})
                    q.pending.appendleft(self._messages[mid])
            consumer.inbox.clear()
            if q is not None:
                self._dispatch(q)
            self._cond.notify_all()

    def ack(self, message_id):
        with self._lock:
            entry = self._unacked.pop(message_id, None)
            if entry is None:
                raise InvalidAck(f"message {message_id!r} is not delivered-and-unacked")
            queue_name, consumer, _ = entry
            consumer.unacked -= 1
            self._messages.pop(message_id, None)
            self._acked += 1
            q = self._queues.get(queue_name)
            if q is not None:
                self._append(q, {"t": "ack", "id": message_id})
                self._dispatch(q)

    def nack(self, message_id, requeue=True):
        with self._lock:
            entry = self._unacked.pop(message_id, None)
            if entry is None:
                raise InvalidAck(f"message {message_id!r} is not delivered-and-unacked")
            queue_name, consumer, _ = entry
            consumer.unacked -= 1
            msg = self._messages[message_id]
            q = self._queues.get(queue_name)
            if q is None:
                self._messages.pop(message_id, None)
                return
            if requeue and msg.delivery_count < MAX_DELIVERIES:
                self._append(q, {"t": "nack", "id": message_id, "rq": True})
                q.pending.appendleft(msg)
            else:
                self._dead_letter(q, msg)
            self._dispatch(q)

    def _dead_letter(self, q, msg):
        self._append(q, {"t": "dead", "id": msg.message_id})
        self._messages.pop(msg.message_id, None)
        dead = self._declare_locked(q.decl.name + ".dead", q.decl.durable)
        moved = Message(
            message_id=msg.message_id, queue=dead.decl.name, payload=msg.payload,
            headers=msg.headers, enqueued_at=msg.enqueued_at,
            delivery_count=msg.delivery_count)
        self._append(dead, {"t": "pub", "id": moved.message_id,
                            "p": base64.b64encode(moved.payload).decode(),
                            "h": moved.headers, "at": moved.enqueued_at,
                            "dc": moved.delivery_count})
        self._messages[moved.message_id] = moved
        dead.pending.append(moved)
        self._dispatch(dead)

    # -- RPC --------------------------------------------------------------------

    def rpc_call(self, queue, payload: bytes, timeout_s) -> bytes:
        """Publish with a private reply queue; return the correlated reply."""
        with self._lock:
            self._require(queue)
        correlation_id = uuid.uuid4().hex
        reply_queue = f"rpc.reply.{correlation_id}"
        self.declare_queue(reply_queue, durable=False)
        reply_box: dict = {}
        done = threading.Event()

        def on_reply(msg):
            if msg.headers.get(CORRELATION_ID) == correlation_id:
                reply_box["payload"] = msg.payload
                self.ack(msg.message_id)
                done.set()
            else:
                self.ack(msg.message_id)

        consumer_id = self.consume(reply_queue, on_reply, prefetch=1)
        try:
            self.publish(queue, payload,
                         {REPLY_TO: reply_queue, CORRELATION_ID: correlation_id})
            if not done.wait(timeout_s):
                raise RpcTimeout(f"no reply from {queue!r} within {timeout_s}s")
            return reply_box["payload"]
        finally:
            self.cancel_consumer(consumer_id)
            self.delete_queue(reply_queue)

    def serve_rpc(self, queue, fn, prefetch=1) -> str:
        """Consume ``queue``; answer each message via its reply-to header."""
        def handler(msg):
            reply = fn(msg.payload)
            reply_to = msg.headers.get(REPLY_TO)
            if reply_to:
                try:
                    self.publish(reply_to, reply,
                                 {CORRELATION_ID: msg.headers.get(CORRELATION_ID, "")})
                except NotFound:
                    pass  # caller gave up and deleted its reply queue
            self.ack(msg.message_id)
        return self.consume(queue, handler, prefetch=prefetch)

    # -- recovery -----------------------------------------------------------------

    def recover(self):
        """Rebuild queues from the persisted logs in the data directory.

        Raises RecoveryError on the first corrupt record; all records before
        the corruption are applied and the damaged log is truncated so later
        appends start from a clean tail.
        """
        corruption = None
        for path in sorted(self.data_dir.glob("*.qlog")):
            queue_name = path.name[:-len(".qlog")]
            bad_offset = self._replay_log(queue_name, path)
            if bad_offset is not None and corruption is None:
                corruption = (queue_name, bad_offset)
        if corruption is not None:
            raise RecoveryError(*corruption)

    def _replay_log(self, queue_name, path):
        data = path.read_bytes()
        offset = 0
        decl = None
        order: list[str] = []          # message ids still in queue, FIFO
        delivered: list[str] = []      # delivered-not-acked, in delivery order
        msgs: dict[str, Message] = {}
        bad_offset = None
        while offset < len(data):
            header_end = offset + 4
            if header_end > len(data):
                bad_offset = offset
                break
            (length,) = struct.unpack(">I", data[offset:header_end])
            body_end = header_end + length
            record_end = body_end + 4
            if record_end > len(data):
                bad_offset = offset
                break
            body = data[header_end:body_end]
            (crc,) = struct.unpack(">I", data[body_end:record_end])
            if zlib.crc32(body) != crc:
                bad_offset = offset
                break
            try:
                event = json.loads(body)
            except ValueError:
                bad_offset = offset
                break
            offset = record_end

            t = event["t"]
            if t == "decl":
                decl = QueueDecl(event["name"], event["durable"])
            elif t == "pub":
                msgs[event["id"]] = Message(
                    message_id=event["id"], queue=queue_name,
                    payload=base64.b64decode(event["p"]), headers=event["h"],
                    enqueued_at=event["at"], delivery_count=event.get("dc", 0))
                order.append(event["id"])
            elif t == "del":
                if event["id"] in order:
                    order.remove(event["id"])
                    delivered.append(event["id"])
                    msgs[event["id"]].delivery_count += 1
            elif t == "ack":
                if event["id"] in delivered:
                    delivered.remove(event["id"])
                msgs.pop(event["id"], None)
            elif t == "nack":
                if event["id"] in delivered:
                    delivered.remove(event["id"])
                    order.insert(0, event["id"])
            elif t == "dead":
                if event["id"] in delivered:
                    delivered.remove(event["id"])
                if event["id"] in order:
                    order.remove(event["id"])
                msgs.pop(event["id"], None)

        with self._lock:
            if decl is None:
                decl = QueueDecl(queue_name, True)
            q = _Queue(decl=decl)
            # Unacked-at-crash messages are redelivered first, in their
            # original delivery order, ahead of the never-delivered tail.
            for mid in delivered + order:
                q.pending.append(msgs[mid])
                self._messages[mid] = msgs[mid]
            self._queues[queue_name] = q
            if bad_offset is not None:
                with open(path, "r+b") as f:
                    f.truncate(bad_offset)
            q.log_file = open(path, "ab")
        return bad_offset

    # -- internals ----------------------------------------------------------------

    def close(self):
        with self._lock:
            self._closed = True
            self._cond.notify_all()
            files = [q.log_file for q in self._queues.values() if q.log_file]
        for consumer in list(self._consumers.values()):
            if consumer.thread.is_alive():
                consumer.thread.join(timeout=5)
        for f in files:
            f.close()

    def _require(self, name) -> _Queue:
        q = self._queues.get(name)
        if q is None:
            raise NotFound(f"queue {name!r} not declared")
        return q

    def _declare_locked(self, name, durable) -> _Queue:
        q = self._queues.get(name)
        if q is not None:
            return q
        q = _Queue(decl=QueueDecl(name, durable))
        self._queues[name] = q
        if durable and self.data_dir is not None:
            q.log_file = open(self._log_path(name), "ab")
            self._append(q, {"t": "decl", "name": name, "durable": durable})
        return q

    def _log_path(self, name) -> Path:
        return self.data_dir / f"{name}.qlog"

    def _append(self, q: _Queue, event: dict):
        if q.log_file is None:
            return
        body = json.dumps(event, separators=(",", ":")).encode()
        q.log_file.write(struct.pack(">I", len(body)) + body +
                         struct.pack(">I", zlib.crc32(body)))
        q.log_file.flush()
        if self._fsync:
            os.fsync(q.log_file.fileno())

    def _dispatch(self, q: _Queue):
        """Assign pending messages to consumers with free prefetch capacity.

        Caller holds the broker lock.  Each message goes to exactly one
        consumer; assignment rotates round-robin across eligible consumers.
        """
        while q.pending:
            eligible = [c for c in q.consumers if not c.cancelled and c.unacked < c.prefetch]
            if not eligible:
                return
            start = q.rr_next % len(eligible)
            consumer = eligible[start]
            q.rr_next += 1
            msg = q.pending.popleft()
            msg.delivery_count += 1
            self._append(q, {"t": "del", "id": msg.message_id})
            self._assign_seq += 1
            self._unacked[msg.message_id] = (q.decl.name, consumer, self._assign_seq)
            consumer.unacked += 1
            consumer.inbox.append(msg)
            self._cond.notify_all()
