"""Machine status tracking: periodic queue polls, walltime-overestimate
correction, wait-time estimation by queue-drain simulation, reliability
scoring, and shortest-wait machine selection.

Users habitually request more walltime than their jobs use, so remaining
runtimes computed from requested walltime alone are systematic
overestimates.  The correction here is the median ratio of observed
runtime to requested walltime over recent completions on each machine
(median, not mean: the overestimate tail is heavy and one-sided).
Completions are inferred by diffing successive queue snapshots: a job
seen RUNNING that later disappears ran for (approximately) its last
observed elapsed time.

The wait estimate replays a strict FIFO drain of the current snapshot:
RUNNING jobs release their nodes after their corrected remaining time,
QUEUED jobs acquire free nodes strictly in queue order (a blocked queue
head blocks everything behind it; no backfill is modeled, which keeps the
estimate conservative), and the candidate job is appended last.  HELD and
other non-runnable entries are excluded.
"""

import heapq
import json
import statistics
from dataclasses import dataclass, field

from . import batch
from .batch import JobState, QueueEntry, Scheduler
from .errors import (ControlPlaneError, InvalidArgument, MachineUnreachable,
                     NoData, NoEligibleMachine, StaleData)
from .store import StateStore, now_s
from .transport import Transport


@dataclass
class StatusConfig:
    poll_interval_s: int = 600          # ten-minute default cadence
    ratio_window: int = 500             # completions per machine used for the ratio
    ratio_min_samples: int = 10         # below this, fall back to ratio 1.0
    reliability_threshold: float = 0.5
    reliability_window: int = 144       # 24 h of polls at the default cadence
    stale_after_polls: int = 3


@dataclass
class QueueSnapshot:
    machine_id: str
    polled_at: int
    entries: list = field(default_factory=list)
    poll_ok: bool = True
    elapsed_fallback_used: bool = False


@dataclass
class WaitEstimate:
    machine_id: str
    nodes: int
    walltime_req_s: int
    wait_s: int
    ratio_used: float
    sample_size: int


@dataclass
class ReliabilityReport:
    machine_id: str
    window_polls: int
    ok_polls: int
    reliability: float


def entry_to_dict(e: QueueEntry) -> dict:
    return {"batch_id": e.batch_id, "queue": e.queue, "state": e.state.value,
            "nodes": e.nodes, "walltime_req_s": e.walltime_req_s,
            "owner": e.owner, "elapsed_s": e.elapsed_s}


def entry_from_dict(d: dict) -> QueueEntry:
    return QueueEntry(batch_id=d["batch_id"], queue=d["queue"],
                      state=JobState(d["state"]), nodes=d["nodes"],
                      walltime_req_s=d["walltime_req_s"], owner=d["owner"],
                      elapsed_s=d["elapsed_s"])


def fifo_drain_wait(total_nodes, running, queued, candidate_nodes) -> int:
    """Start offset of a candidate appended behind ``queued`` on a FIFO machine.

    ``running``: (remaining_s, nodes) pairs currently occupying nodes.
    ``queued``: (duration_s, nodes) pairs in queue order.
    """
    if candidate_nodes > total_nodes:
        raise InvalidArgument(
            f"candidate needs {candidate_nodes} nodes, machine has {total_nodes}")
    releases = [(max(0, int(r)), int(n)) for r, n in running]
    heapq.heapify(releases)
    free = total_nodes - sum(n for _, n in releases)
    t = 0
    for duration, nodes in queued:
        if nodes > total_nodes:
            continue  # can never start here; defensively skip
        while nodes > free:
            at, released = heapq.heappop(releases)
            t = max(t, at)
            free += released
        free -= nodes
        heapq.heappush(releases, (t + duration, nodes))
    while candidate_nodes > free:
        at, released = heapq.heappop(releases)
        t = max(t, at)
        free += released
    return t


class StatusService:
    """Polls machines, persists snapshot history, and answers estimates."""

    def __init__(self, store: StateStore, transport: Transport,
                 config: StatusConfig | None = None):
        self.store = store
        self.transport = transport
        self.config = config or StatusConfig()
        # batch_id -> (walltime_req_s, last observed elapsed) per machine;
        # rebuilt lazily after a restart as jobs are observed again.
        self._running_seen: dict[str, dict[str, tuple[int, int]]] = {}

    # -- polling ---------------------------------------------------------------

    def poll_machine(self, machine_id) -> QueueSnapshot:
        """Poll one machine's full queue; a failed poll is persisted as data."""
        machine = self.store.get_machine(machine_id)
        polled_at = now_s()
        try:
            result = self.transport.run_command(
                machine_id, batch.render_status_command(Scheduler(machine.scheduler)))
            if result.exit_code != 0:
                raise MachineUnreachable(result.stderr.strip() or "status command failed")
            parsed = batch.parse_queue_status(Scheduler(machine.scheduler), result.stdout)
            snapshot = QueueSnapshot(
                machine_id=machine_id, polled_at=polled_at, entries=parsed.entries,
                poll_ok=True, elapsed_fallback_used=parsed.elapsed_fallback_used)
        except (MachineUnreachable, ControlPlaneError):
            snapshot = QueueSnapshot(
                machine_id=machine_id, polled_at=polled_at, entries=[], poll_ok=False)
        self.store.add_snapshot(
            machine_id, snapshot.polled_at, snapshot.poll_ok,
            snapshot.elapsed_fallback_used,
            json.dumps([entry_to_dict(e) for e in snapshot.entries]))
        if snapshot.poll_ok:
            self._infer_completions(machine_id, snapshot)
        report = self.reliability(machine_id)
        self.store.set_machine_health(
            machine_id, available=snapshot.poll_ok, reliability=report.reliability)
        return snapshot

    def _infer_completions(self, machine_id, snapshot: QueueSnapshot):
        seen = self._running_seen.setdefault(machine_id, {})
        current_ids = {e.batch_id for e in snapshot.entries}
        for entry in snapshot.entries:
            if entry.state == JobState.RUNNING:
                seen[entry.batch_id] = (entry.walltime_req_s, entry.elapsed_s or 0)
        for batch_id in list(seen):
            if batch_id in current_ids:
                continue
            walltime, last_elapsed = seen.pop(batch_id)
            if last_elapsed > 0:  # a zero says nothing about the true runtime
                self.store.add_completion(
                    machine_id, batch_id, walltime, last_elapsed, snapshot.polled_at)

    def latest_snapshot(self, machine_id, ok_only=True) -> QueueSnapshot | None:
        row = self.store.latest_snapshot_row(machine_id, ok_only=ok_only)
        if row is None:
            return None
        return QueueSnapshot(
            machine_id=row["machine_id"], polled_at=row["polled_at"],
            entries=[entry_from_dict(d) for d in json.loads(row["entries"])],
            poll_ok=bool(row["poll_ok"]),
            elapsed_fallback_used=bool(row["elapsed_fallback_used"]))

    # -- statistics --------------------------------------------------------------

    def walltime_ratio(self, machine_id) -> tuple[float, int]:
        """Median runtime/requested ratio over recent completions.

        Falls back to the naive ratio of 1.0 (requested walltime taken at
        face value) until enough history has accumulated.
        """
        pairs = self.store.recent_completions(machine_id, self.config.ratio_window)
        if len(pairs) < self.config.ratio_min_samples:
            return 1.0, len(pairs)
        ratios = [actual / req for req, actual in pairs if req > 0]
        return statistics.median(ratios), len(ratios)

    def reliability(self, machine_id) -> ReliabilityReport:
        flags = self.store.recent_poll_flags(machine_id, self.config.reliability_window)
        if not flags:
            return ReliabilityReport(machine_id, 0, 0, 1.0)
        ok = sum(flags)
        return ReliabilityReport(machine_id, len(flags), ok, ok / len(flags))

    # -- estimation ----------------------------------------------------------------

    def estimate_wait(self, machine_id, nodes, walltime_req_s) -> WaitEstimate:
        """Deterministic FIFO queue-drain estimate for a prospective job."""
        machine = self.store.get_machine(machine_id)
        snapshot = self.latest_snapshot(machine_id, ok_only=True)
        if snapshot is None:
            raise NoData(f"no successful poll of machine {machine_id!r} yet")
        age = now_s() - snapshot.polled_at
        if age > self.config.stale_after_polls * self.config.poll_interval_s:
            raise StaleData(f"latest snapshot of {machine_id!r} is {age}s old")
        ratio, sample_size = self.walltime_ratio(machine_id)
        running, queued = [], []
        for entry in snapshot.entries:
            if entry.state == JobState.RUNNING:
                predicted = int(round(ratio * entry.walltime_req_s))
                remaining = max(0, predicted - (entry.elapsed_s or 0))
                running.append((remaining, entry.nodes))
            elif entry.state == JobState.QUEUED:
                queued.append((int(round(ratio * entry.walltime_req_s)), entry.nodes))
        wait = fifo_drain_wait(machine.total_nodes, running, queued, nodes)
        return WaitEstimate(machine_id=machine_id, nodes=nodes,
                            walltime_req_s=walltime_req_s, wait_s=wait,
                            ratio_used=ratio, sample_size=sample_size)

    def select_machine(self, nodes, walltime_req_s, machines=None) -> str:
        """Shortest-estimated-wait eligible machine; name breaks ties."""
        if machines is None:
            machines = self.store.list_machines()
        candidates = []
        for machine in machines:
            if not machine.available:
                continue
            if machine.reliability < self.config.reliability_threshold:
                continue
            if machine.total_nodes < nodes:
                continue
            try:
                estimate = self.estimate_wait(machine.machine_id, nodes, walltime_req_s)
            except (NoData, StaleData, InvalidArgument):
                continue
            candidates.append((estimate.wait_s, machine.name, machine.machine_id))
        if not candidates:
            raise NoEligibleMachine(
                f"no machine can take a {nodes}-node job right now")
        candidates.sort()
        return candidates[0][2]
