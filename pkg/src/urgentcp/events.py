"""Bounded event ring with monotonic sequence numbers and live fan-out.

Backs the gateway's server-sent event stream: a client replays events
after its last seen sequence number, then follows live with no gaps and
no duplicates.  Events older than the ring capacity are no longer
replayable.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass


@dataclass
class ApiEvent:
    seq: int
    kind: str  # ACTIVITY_STATUS | JOB_STATUS | MACHINE_STATUS | SENSOR_ARRIVAL
    body: dict
    at: int


class EventBus:
    def __init__(self, capacity=10_000):
        self._ring = deque(maxlen=capacity)
        self._seq = 0
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)

    def emit(self, kind, body) -> int:
        with self._lock:
            self._seq += 1
            event = ApiEvent(seq=self._seq, kind=kind, body=dict(body),
                             at=int(time.time()))
            self._ring.append(event)
            self._cond.notify_all()
        return event.seq

    @property
    def last_seq(self) -> int:
        with self._lock:
            return self._seq

    def replay(self, since: int) -> list[ApiEvent]:
        """Events with seq > since still held in the ring, oldest first."""
        with self._lock:
            return [e for e in self._ring if e.seq > since]

    def subscribe(self, since: int, poll_timeout=0.5):
        """Yield events after ``since``, then follow live.

        Yields ``None`` whenever ``poll_timeout`` elapses with no event so
        the caller can emit a keepalive and notice closed connections.
        """
        cursor = since
        while True:
            batch = self.replay(cursor)
            if batch:
                for event in batch:
                    cursor = event.seq
                    yield event
                continue
            with self._lock:
                self._cond.wait(poll_timeout)
            if not self.replay(cursor):
                yield None
