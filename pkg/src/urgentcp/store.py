"""Persistent system-of-record: activities, jobs, machines, queue history,
object handles, and the workflow bookkeeping that must survive restarts.

Backed by a single embedded SQLite database in WAL mode; a server-based
relational backend could be swapped in behind the same interface.  Object
payloads live on disk next to the database, addressed by
``objstore://<store_name>/<key>`` URIs, so bulky simulation data never
bloats the relational rows.

All operations are safe for concurrent callers; each public method is one
transaction.
"""

import hashlib
import json
import re
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import InvalidArgument, InvalidState, InvalidTransition, NotFound


class ActivityStatus(str, Enum):
    PENDING = "PENDING"
    ACTIVE = "ACTIVE"
    COMPLETED = "COMPLETED"
    ERROR = "ERROR"
    CANCELLED = "CANCELLED"


class JobStatus(str, Enum):
    PENDING_SUBMIT = "PENDING_SUBMIT"
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    ERROR = "ERROR"
    CANCELLED = "CANCELLED"


ACTIVITY_TERMINAL = {ActivityStatus.COMPLETED, ActivityStatus.ERROR, ActivityStatus.CANCELLED}
JOB_TERMINAL = {JobStatus.COMPLETED, JobStatus.ERROR, JobStatus.CANCELLED}

ACTIVITY_TRANSITIONS = {
    ActivityStatus.PENDING: {ActivityStatus.ACTIVE},
    ActivityStatus.ACTIVE: ACTIVITY_TERMINAL,
    ActivityStatus.COMPLETED: set(),
    ActivityStatus.ERROR: set(),
    ActivityStatus.CANCELLED: set(),
}

# Forward jumps are legal: a short job can go QUEUED -> COMPLETED between
# two polls without ever being observed RUNNING.
JOB_TRANSITIONS = {
    JobStatus.PENDING_SUBMIT: {JobStatus.QUEUED, JobStatus.RUNNING,
                               JobStatus.ERROR, JobStatus.CANCELLED},
    JobStatus.QUEUED: {JobStatus.RUNNING, JobStatus.COMPLETED,
                       JobStatus.ERROR, JobStatus.CANCELLED},
    JobStatus.RUNNING: {JobStatus.COMPLETED, JobStatus.ERROR, JobStatus.CANCELLED},
    JobStatus.COMPLETED: set(),
    JobStatus.ERROR: set(),
    JobStatus.CANCELLED: set(),
}

_STORE_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")
URI_SCHEME = "objstore://"


def now_s() -> int:
    """UTC wall time at second resolution, the store's timestamp unit."""
    return int(time.time())


@dataclass
class ActivityRecord:
    activity_id: str
    kind: str
    status: ActivityStatus
    workflow_id: str
    created_at: int
    updated_at: int
    metadata: dict = field(default_factory=dict)


@dataclass
class JobRecord:
    job_id: str
    activity_id: str
    machine_id: str
    status: JobStatus
    nodes: int
    walltime_req_s: int
    batch_id: str | None = None
    submitted_at: int | None = None
    started_at: int | None = None
    ended_at: int | None = None
    result_handles: list = field(default_factory=list)  # handle uris


@dataclass
class MachineRecord:
    machine_id: str
    name: str
    scheduler: str
    total_nodes: int
    cores_per_node: int
    available: bool
    reliability: float


@dataclass
class ObjectHandle:
    handle_id: str
    store_name: str
    key: str
    uri: str
    size_bytes: int
    sha256: str


_SCHEMA = """
CREATE TABLE IF NOT EXISTS activities (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    activity_id TEXT UNIQUE NOT NULL,
    kind TEXT NOT NULL,
    status TEXT NOT NULL,
    workflow_id TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    updated_at INTEGER NOT NULL,
    metadata TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id TEXT UNIQUE NOT NULL,
    activity_id TEXT NOT NULL REFERENCES activities(activity_id),
    machine_id TEXT NOT NULL REFERENCES machines(machine_id),
    batch_id TEXT,
    status TEXT NOT NULL,
    nodes INTEGER NOT NULL,
    walltime_req_s INTEGER NOT NULL,
    submitted_at INTEGER,
    started_at INTEGER,
    ended_at INTEGER,
    result_handles TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS machines (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    machine_id TEXT UNIQUE NOT NULL,
    name TEXT UNIQUE NOT NULL,
    scheduler TEXT NOT NULL,
    total_nodes INTEGER NOT NULL,
    cores_per_node INTEGER NOT NULL,
    available INTEGER NOT NULL,
    reliability REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS objects (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    handle_id TEXT UNIQUE NOT NULL,
    store_name TEXT NOT NULL,
    key TEXT NOT NULL,
    uri TEXT NOT NULL,
    size_bytes INTEGER NOT NULL,
    sha256 TEXT NOT NULL,
    UNIQUE (store_name, key)
);
CREATE TABLE IF NOT EXISTS transitions (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    entity TEXT NOT NULL,
    entity_id TEXT NOT NULL,
    from_status TEXT,
    to_status TEXT NOT NULL,
    at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS snapshots (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    machine_id TEXT NOT NULL,
    polled_at INTEGER NOT NULL,
    poll_ok INTEGER NOT NULL,
    elapsed_fallback_used INTEGER NOT NULL,
    entries TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS completions (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    machine_id TEXT NOT NULL,
    batch_id TEXT NOT NULL,
    walltime_req_s INTEGER NOT NULL,
    actual_s INTEGER NOT NULL,
    observed_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS workflows (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    workflow_id TEXT UNIQUE NOT NULL,
    definition TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS barriers (
    activity_id TEXT NOT NULL,
    stage TEXT NOT NULL,
    expected INTEGER NOT NULL,
    arrived TEXT NOT NULL,
    context TEXT NOT NULL,
    fired INTEGER NOT NULL DEFAULT 0,
    executed INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (activity_id, stage)
);
CREATE TABLE IF NOT EXISTS continuations (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    activity_id TEXT NOT NULL,
    stage TEXT NOT NULL,
    ensemble_index INTEGER NOT NULL,
    context TEXT NOT NULL,
    job_id TEXT,
    retries INTEGER NOT NULL DEFAULT 0,
    done INTEGER NOT NULL DEFAULT 0,
    UNIQUE (activity_id, stage, ensemble_index)
);
CREATE TABLE IF NOT EXISTS activity_counters (
    activity_id TEXT PRIMARY KEY,
    inflight INTEGER NOT NULL DEFAULT 0,
    terminal_fired INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS kv (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_jobs_activity ON jobs(activity_id);
CREATE INDEX IF NOT EXISTS idx_jobs_machine ON jobs(machine_id);
CREATE INDEX IF NOT EXISTS idx_snapshots_machine ON snapshots(machine_id, seq);
CREATE INDEX IF NOT EXISTS idx_completions_machine ON completions(machine_id, seq);
"""


class StateStore:
    """Embedded transactional store with write-ahead durability."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._objects_dir = self.data_dir / "objects"
        self._objects_dir.mkdir(exist_ok=True)
        self._lock = threading.RLock()
        self._db = sqlite3.connect(
            self.data_dir / "control.db", check_same_thread=False)
        self._db.row_factory = sqlite3.Row
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute("PRAGMA synchronous=NORMAL")
        self._db.execute("PRAGMA foreign_keys=ON")
        with self._lock, self._db:
            self._db.executescript(_SCHEMA)
        self._transition_hooks = []

    def close(self):
        with self._lock:
            self._db.close()

    def on_transition(self, callback):
        """Register ``callback(entity, record_dict, old_status, new_status)``,
        invoked once for every persisted status change."""
        self._transition_hooks.append(callback)

    def _notify(self, entity, record, old, new):
        for cb in self._transition_hooks:
            cb(entity, record, old, new)

    # -- machines ----------------------------------------------------------

    def register_machine(self, name, scheduler, total_nodes, cores_per_node,
                         available=True, reliability=1.0) -> MachineRecord:
        if total_nodes < 1 or cores_per_node < 1:
            raise InvalidArgument("node and core counts must be positive")
        if not 0.0 <= reliability <= 1.0:
            raise InvalidArgument("reliability must lie in [0, 1]")
        machine_id = "mach-" + uuid.uuid4().hex[:10]
        with self._lock, self._db:
            existing = self._db.execute(
                "SELECT * FROM machines WHERE name = ?", (name,)).fetchone()
            if existing:
                raise InvalidArgument(f"machine name {name!r} already registered")
            self._db.execute(
                "INSERT INTO machines (machine_id, name, scheduler, total_nodes,"
                " cores_per_node, available, reliability) VALUES (?,?,?,?,?,?,?)",
                (machine_id, name, scheduler, total_nodes, cores_per_node,
                 int(available), reliability))
            state = "available" if available else "offline"
            self._log_transition("machine", machine_id, None, state, now_s())
        record = self.get_machine(machine_id)
        self._notify("machine", self.machine_dict(record), None, state)
        return record

    def get_machine(self, machine_id) -> MachineRecord:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM machines WHERE machine_id = ?", (machine_id,)).fetchone()
        if not row:
            raise NotFound(f"machine {machine_id!r}")
        return self._machine(row)

    def get_machine_by_name(self, name) -> MachineRecord:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM machines WHERE name = ?", (name,)).fetchone()
        if not row:
            raise NotFound(f"machine named {name!r}")
        return self._machine(row)

    def list_machines(self) -> list[MachineRecord]:
        with self._lock:
            rows = self._db.execute("SELECT * FROM machines ORDER BY seq").fetchall()
        return [self._machine(r) for r in rows]

    def set_machine_health(self, machine_id, available=None, reliability=None) -> MachineRecord:
        with self._lock, self._db:
            before = self.get_machine(machine_id)
            if available is None:
                available = before.available
            if reliability is None:
                reliability = before.reliability
            if not 0.0 <= reliability <= 1.0:
                raise InvalidArgument("reliability must lie in [0, 1]")
            self._db.execute(
                "UPDATE machines SET available = ?, reliability = ? WHERE machine_id = ?",
                (int(available), reliability, machine_id))
            changed = before.available != available
            if changed:
                old = "available" if before.available else "offline"
                new = "available" if available else "offline"
                self._log_transition("machine", machine_id, old, new, now_s())
        after = self.get_machine(machine_id)
        if changed:
            self._notify("machine", self.machine_dict(after), old, new)
        return after

    @staticmethod
    def _machine(row) -> MachineRecord:
        return MachineRecord(
            machine_id=row["machine_id"], name=row["name"], scheduler=row["scheduler"],
            total_nodes=row["total_nodes"], cores_per_node=row["cores_per_node"],
            available=bool(row["available"]), reliability=row["reliability"])

    @staticmethod
    def machine_dict(m: MachineRecord) -> dict:
        return {"machine_id": m.machine_id, "name": m.name, "scheduler": m.scheduler,
                "total_nodes": m.total_nodes, "cores_per_node": m.cores_per_node,
                "available": m.available, "reliability": m.reliability}

    # -- activities --------------------------------------------------------

    def create_activity(self, kind, workflow_id, metadata=None) -> ActivityRecord:
        metadata = dict(metadata or {})
        with self._lock, self._db:
            wf = self._db.execute(
                "SELECT 1 FROM workflows WHERE workflow_id = ?", (workflow_id,)).fetchone()
            if not wf:
                raise NotFound(f"workflow {workflow_id!r} not registered")
            activity_id = "act-" + uuid.uuid4().hex[:12]
            ts = now_s()
            self._db.execute(
                "INSERT INTO activities (activity_id, kind, status, workflow_id,"
                " created_at, updated_at, metadata) VALUES (?,?,?,?,?,?,?)",
                (activity_id, kind, ActivityStatus.PENDING.value, workflow_id,
                 ts, ts, json.dumps(metadata, sort_keys=True)))
            self._log_transition("activity", activity_id, None, ActivityStatus.PENDING.value, ts)
        record = self.get_activity(activity_id)
        self._notify("activity", self.activity_dict(record), None, ActivityStatus.PENDING.value)
        return record

    def get_activity(self, activity_id) -> ActivityRecord:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM activities WHERE activity_id = ?", (activity_id,)).fetchone()
        if not row:
            raise NotFound(f"activity {activity_id!r}")
        return self._activity(row)

    def list_activities(self) -> list[ActivityRecord]:
        with self._lock:
            rows = self._db.execute("SELECT * FROM activities ORDER BY seq").fetchall()
        return [self._activity(r) for r in rows]

    def update_activity_status(self, activity_id, new_status) -> ActivityRecord:
        new_status = ActivityStatus(new_status)
        with self._lock, self._db:
            before = self.get_activity(activity_id)
            if new_status not in ACTIVITY_TRANSITIONS[before.status]:
                raise InvalidTransition(
                    f"activity {activity_id}: {before.status.value} -> {new_status.value}")
            ts = now_s()
            self._db.execute(
                "UPDATE activities SET status = ?, updated_at = ? WHERE activity_id = ?",
                (new_status.value, ts, activity_id))
            self._log_transition("activity", activity_id, before.status.value,
                                 new_status.value, ts)
        after = self.get_activity(activity_id)
        self._notify("activity", self.activity_dict(after), before.status.value, new_status.value)
        return after

    def touch_activity(self, activity_id):
        with self._lock, self._db:
            self._db.execute(
                "UPDATE activities SET updated_at = ? WHERE activity_id = ?",
                (now_s(), activity_id))

    @staticmethod
    def _activity(row) -> ActivityRecord:
        return ActivityRecord(
            activity_id=row["activity_id"], kind=row["kind"],
            status=ActivityStatus(row["status"]), workflow_id=row["workflow_id"],
            created_at=row["created_at"], updated_at=row["updated_at"],
            metadata=json.loads(row["metadata"]))

    @staticmethod
    def activity_dict(a: ActivityRecord) -> dict:
        return {"activity_id": a.activity_id, "kind": a.kind, "status": a.status.value,
                "workflow_id": a.workflow_id, "created_at": a.created_at,
                "updated_at": a.updated_at, "metadata": a.metadata}

    # -- jobs ----------------------------------------------------------------

    def create_job(self, activity_id, machine_id, nodes, walltime_req_s) -> JobRecord:
        if nodes < 1:
            raise InvalidArgument(f"nodes must be >= 1, got {nodes}")
        if walltime_req_s < 1:
            raise InvalidArgument(f"walltime_req_s must be >= 1, got {walltime_req_s}")
        with self._lock, self._db:
            activity = self.get_activity(activity_id)
            if activity.status in ACTIVITY_TERMINAL:
                raise InvalidState(
                    f"activity {activity_id} is {activity.status.value}; cannot add jobs")
            self.get_machine(machine_id)
            job_id = "job-" + uuid.uuid4().hex[:12]
            self._db.execute(
                "INSERT INTO jobs (job_id, activity_id, machine_id, status, nodes,"
                " walltime_req_s, result_handles) VALUES (?,?,?,?,?,?,?)",
                (job_id, activity_id, machine_id, JobStatus.PENDING_SUBMIT.value,
                 nodes, walltime_req_s, "[]"))
            self._log_transition("job", job_id, None, JobStatus.PENDING_SUBMIT.value, now_s())
        record = self.get_job(job_id)
        self._notify("job", self.job_dict(record), None, JobStatus.PENDING_SUBMIT.value)
        return record

    def get_job(self, job_id) -> JobRecord:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM jobs WHERE job_id = ?", (job_id,)).fetchone()
        if not row:
            raise NotFound(f"job {job_id!r}")
        return self._job(row)

    def query_jobs(self, activity_id=None, machine_id=None, status=None) -> list[JobRecord]:
        """Jobs matching the conjunction of the provided filters, in creation order."""
        clauses, params = [], []
        if activity_id is not None:
            clauses.append("activity_id = ?")
            params.append(activity_id)
        if machine_id is not None:
            clauses.append("machine_id = ?")
            params.append(machine_id)
        if status is not None:
            clauses.append("status = ?")
            params.append(JobStatus(status).value)
        sql = "SELECT * FROM jobs"
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        sql += " ORDER BY seq"
        with self._lock:
            rows = self._db.execute(sql, params).fetchall()
        return [self._job(r) for r in rows]

    def place_job(self, job_id, machine_id) -> JobRecord:
        """Re-point an unsubmitted job at a different machine."""
        with self._lock, self._db:
            job = self.get_job(job_id)
            if job.status != JobStatus.PENDING_SUBMIT:
                raise InvalidState(f"job {job_id} is {job.status.value}; cannot re-place")
            self.get_machine(machine_id)
            self._db.execute(
                "UPDATE jobs SET machine_id = ? WHERE job_id = ?", (machine_id, job_id))
        return self.get_job(job_id)

    def set_job_batch_id(self, job_id, batch_id) -> JobRecord:
        with self._lock, self._db:
            self.get_job(job_id)
            self._db.execute(
                "UPDATE jobs SET batch_id = ?, submitted_at = ? WHERE job_id = ?",
                (batch_id, now_s(), job_id))
        return self.get_job(job_id)

    def update_job_status(self, job_id, new_status, started_at=None, ended_at=None) -> JobRecord:
        new_status = JobStatus(new_status)
        with self._lock, self._db:
            before = self.get_job(job_id)
            if new_status not in JOB_TRANSITIONS[before.status]:
                raise InvalidTransition(
                    f"job {job_id}: {before.status.value} -> {new_status.value}")
            ts = now_s()
            if new_status == JobStatus.RUNNING and started_at is None:
                started_at = ts
            if new_status in JOB_TERMINAL and ended_at is None:
                ended_at = ts
            started_at = started_at if started_at is not None else before.started_at
            ended_at = ended_at if ended_at is not None else before.ended_at
            if started_at is not None and ended_at is not None and started_at > ended_at:
                raise InvalidArgument("started_at must not exceed ended_at")
            self._db.execute(
                "UPDATE jobs SET status = ?, started_at = ?, ended_at = ? WHERE job_id = ?",
                (new_status.value, started_at, ended_at, job_id))
            self._db.execute(
                "UPDATE activities SET updated_at = ? WHERE activity_id = ?",
                (ts, before.activity_id))
            self._log_transition("job", job_id, before.status.value, new_status.value, ts)
        after = self.get_job(job_id)
        self._notify("job", self.job_dict(after), before.status.value, new_status.value)
        return after

    def set_job_results(self, job_id, handle_uris) -> JobRecord:
        """Replace (not append) the job's result handle list; idempotent re-fetch."""
        with self._lock, self._db:
            before = self.get_job(job_id)
            self._db.execute(
                "UPDATE jobs SET result_handles = ? WHERE job_id = ?",
                (json.dumps(sorted(handle_uris)), job_id))
        after = self.get_job(job_id)
        if after.result_handles != before.result_handles:
            # Not a status transition, but watchers need the updated record
            # (old == new marks it as a plain record refresh).
            self._notify("job", self.job_dict(after), after.status.value,
                         after.status.value)
        return after

    def get_transitions(self, entity, entity_id) -> list[tuple]:
        with self._lock:
            rows = self._db.execute(
                "SELECT from_status, to_status, at FROM transitions"
                " WHERE entity = ? AND entity_id = ? ORDER BY seq",
                (entity, entity_id)).fetchall()
        return [(r["from_status"], r["to_status"], r["at"]) for r in rows]

    def _log_transition(self, entity, entity_id, old, new, ts):
        self._db.execute(
            "INSERT INTO transitions (entity, entity_id, from_status, to_status, at)"
            " VALUES (?,?,?,?,?)", (entity, entity_id, old, new, ts))

    @staticmethod
    def _job(row) -> JobRecord:
        return JobRecord(
            job_id=row["job_id"], activity_id=row["activity_id"],
            machine_id=row["machine_id"], batch_id=row["batch_id"],
            status=JobStatus(row["status"]), nodes=row["nodes"],
            walltime_req_s=row["walltime_req_s"], submitted_at=row["submitted_at"],
            started_at=row["started_at"], ended_at=row["ended_at"],
            result_handles=json.loads(row["result_handles"]))

    @staticmethod
    def job_dict(j: JobRecord) -> dict:
        return {"job_id": j.job_id, "activity_id": j.activity_id,
                "machine_id": j.machine_id, "batch_id": j.batch_id,
                "status": j.status.value, "nodes": j.nodes,
                "walltime_req_s": j.walltime_req_s, "submitted_at": j.submitted_at,
                "started_at": j.started_at, "ended_at": j.ended_at,
                "result_handles": j.result_handles}

    # -- object store --------------------------------------------------------

    def put_object(self, store_name, key, data: bytes) -> ObjectHandle:
        if not key:
            raise InvalidArgument("object key must be non-empty")
        if not _STORE_NAME_RE.match(store_name):
            raise InvalidArgument(f"bad store name {store_name!r}")
        digest = hashlib.sha256(data).hexdigest()
        uri = f"{URI_SCHEME}{store_name}/{key}"
        path = self._object_path(store_name, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock, self._db:
            path.write_bytes(data)
            row = self._db.execute(
                "SELECT handle_id FROM objects WHERE store_name = ? AND key = ?",
                (store_name, key)).fetchone()
            if row:
                handle_id = row["handle_id"]
                self._db.execute(
                    "UPDATE objects SET size_bytes = ?, sha256 = ? WHERE handle_id = ?",
                    (len(data), digest, handle_id))
            else:
                handle_id = "obj-" + uuid.uuid4().hex[:12]
                self._db.execute(
                    "INSERT INTO objects (handle_id, store_name, key, uri, size_bytes, sha256)"
                    " VALUES (?,?,?,?,?,?)",
                    (handle_id, store_name, key, uri, len(data), digest))
        return ObjectHandle(handle_id, store_name, key, uri, len(data), digest)

    def get_handle(self, ref) -> ObjectHandle:
        """Resolve an ObjectHandle, handle id, or objstore:// URI."""
        if isinstance(ref, ObjectHandle):
            ref = ref.uri
        if ref.startswith(URI_SCHEME):
            rest = ref[len(URI_SCHEME):]
            if "/" not in rest:
                raise NotFound(f"malformed object uri {ref!r}")
            store_name, key = rest.split("/", 1)
            query = ("SELECT * FROM objects WHERE store_name = ? AND key = ?",
                     (store_name, key))
        else:
            query = ("SELECT * FROM objects WHERE handle_id = ?", (ref,))
        with self._lock:
            row = self._db.execute(*query).fetchone()
        if not row:
            raise NotFound(f"object {ref!r}")
        return ObjectHandle(row["handle_id"], row["store_name"], row["key"],
                            row["uri"], row["size_bytes"], row["sha256"])

    def get_object(self, ref) -> bytes:
        handle = self.get_handle(ref)
        path = self._object_path(handle.store_name, handle.key)
        if not path.exists():
            raise NotFound(f"object payload missing for {handle.uri}")
        return path.read_bytes()

    def _object_path(self, store_name, key) -> Path:
        hashed = hashlib.sha256(key.encode()).hexdigest()
        return self._objects_dir / store_name / f"{hashed}.bin"

    # -- queue history -------------------------------------------------------

    def add_snapshot(self, machine_id, polled_at, poll_ok, elapsed_fallback_used, entries_json):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO snapshots (machine_id, polled_at, poll_ok,"
                " elapsed_fallback_used, entries) VALUES (?,?,?,?,?)",
                (machine_id, polled_at, int(poll_ok), int(elapsed_fallback_used),
                 entries_json))

    def latest_snapshot_row(self, machine_id, ok_only=False):
        sql = "SELECT * FROM snapshots WHERE machine_id = ?"
        if ok_only:
            sql += " AND poll_ok = 1"
        sql += " ORDER BY seq DESC LIMIT 1"
        with self._lock:
            return self._db.execute(sql, (machine_id,)).fetchone()

    def recent_poll_flags(self, machine_id, window) -> list[bool]:
        """poll_ok flags of the most recent polls, oldest first."""
        with self._lock:
            rows = self._db.execute(
                "SELECT poll_ok FROM snapshots WHERE machine_id = ?"
                " ORDER BY seq DESC LIMIT ?", (machine_id, window)).fetchall()
        return [bool(r["poll_ok"]) for r in reversed(rows)]

    def add_completion(self, machine_id, batch_id, walltime_req_s, actual_s, observed_at):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO completions (machine_id, batch_id, walltime_req_s,"
                " actual_s, observed_at) VALUES (?,?,?,?,?)",
                (machine_id, batch_id, walltime_req_s, actual_s, observed_at))

    def recent_completions(self, machine_id, limit) -> list[tuple[int, int]]:
        """(walltime_req_s, actual_s) pairs for the most recent completions."""
        with self._lock:
            rows = self._db.execute(
                "SELECT walltime_req_s, actual_s FROM completions WHERE machine_id = ?"
                " ORDER BY seq DESC LIMIT ?", (machine_id, limit)).fetchall()
        return [(r["walltime_req_s"], r["actual_s"]) for r in rows]

    # -- workflow bookkeeping --------------------------------------------------

    def save_workflow(self, workflow_id, definition_json):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO workflows (workflow_id, definition) VALUES (?, ?)"
                " ON CONFLICT (workflow_id) DO UPDATE SET definition = excluded.definition",
                (workflow_id, definition_json))

    def get_workflow_json(self, workflow_id) -> str:
        with self._lock:
            row = self._db.execute(
                "SELECT definition FROM workflows WHERE workflow_id = ?",
                (workflow_id,)).fetchone()
        if not row:
            raise NotFound(f"workflow {workflow_id!r}")
        return row["definition"]

    def list_workflow_ids(self) -> list[str]:
        with self._lock:
            rows = self._db.execute("SELECT workflow_id FROM workflows ORDER BY seq").fetchall()
        return [r["workflow_id"] for r in rows]

    def barrier_arrive(self, activity_id, stage, arrival_key, context_json, expected) -> dict:
        """Record one arrival at a join barrier and return the barrier state.

        Arrivals are deduplicated by ``arrival_key`` (a logical edge/branch
        identity, stable across message redelivery), so replays never
        double-count.  ``fired`` flips true on the arrival that completes
        the barrier; ``executed`` is set separately once the stage's
        effects have been carried out.
        """
        with self._lock, self._db:
            row = self._db.execute(
                "SELECT * FROM barriers WHERE activity_id = ? AND stage = ?",
                (activity_id, stage)).fetchone()
            if row is None:
                arrived = [arrival_key]
                merged = json.loads(context_json)
                fired = expected <= 1
                self._db.execute(
                    "INSERT INTO barriers (activity_id, stage, expected, arrived,"
                    " context, fired) VALUES (?,?,?,?,?,?)",
                    (activity_id, stage, expected, json.dumps(arrived),
                     json.dumps(merged, sort_keys=True), int(fired)))
                return {"fired": fired, "executed": False, "arrived": 1,
                        "context": json.dumps(merged, sort_keys=True)}
            arrived = json.loads(row["arrived"])
            merged = json.loads(row["context"])
            if arrival_key not in arrived and not row["fired"]:
                arrived.append(arrival_key)
                merged.update(json.loads(context_json))
                fired = len(arrived) >= row["expected"]
                self._db.execute(
                    "UPDATE barriers SET arrived = ?, context = ?, fired = ?"
                    " WHERE activity_id = ? AND stage = ?",
                    (json.dumps(arrived), json.dumps(merged, sort_keys=True),
                     int(fired), activity_id, stage))
            else:
                fired = bool(row["fired"])
            return {"fired": fired, "executed": bool(row["executed"]),
                    "arrived": len(arrived),
                    "context": json.dumps(merged, sort_keys=True)}

    def mark_barrier_executed(self, activity_id, stage):
        with self._lock, self._db:
            self._db.execute(
                "UPDATE barriers SET executed = 1 WHERE activity_id = ? AND stage = ?",
                (activity_id, stage))

    def get_continuation(self, cont_seq) -> dict | None:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM continuations WHERE seq = ?", (cont_seq,)).fetchone()
        return dict(row) if row else None

    def create_continuation(self, activity_id, stage, ensemble_index, context_json):
        """Persist a submit intent; returns (seq, created) and dedups replays."""
        with self._lock, self._db:
            row = self._db.execute(
                "SELECT seq FROM continuations WHERE activity_id = ? AND stage = ?"
                " AND ensemble_index = ?", (activity_id, stage, ensemble_index)).fetchone()
            if row:
                return row["seq"], False
            cur = self._db.execute(
                "INSERT INTO continuations (activity_id, stage, ensemble_index, context)"
                " VALUES (?,?,?,?)", (activity_id, stage, ensemble_index, context_json))
            return cur.lastrowid, True

    def attach_continuation_job(self, cont_seq, job_id):
        with self._lock, self._db:
            self._db.execute(
                "UPDATE continuations SET job_id = ? WHERE seq = ?", (job_id, cont_seq))

    def bump_continuation_retries(self, cont_seq) -> int:
        with self._lock, self._db:
            self._db.execute(
                "UPDATE continuations SET retries = retries + 1 WHERE seq = ?", (cont_seq,))
            row = self._db.execute(
                "SELECT retries FROM continuations WHERE seq = ?", (cont_seq,)).fetchone()
        return row["retries"]

    def mark_continuation_done(self, cont_seq):
        with self._lock, self._db:
            self._db.execute(
                "UPDATE continuations SET done = 1 WHERE seq = ?", (cont_seq,))

    def find_continuation_by_job(self, job_id):
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM continuations WHERE job_id = ? AND done = 0",
                (job_id,)).fetchone()
        return dict(row) if row else None

    def open_continuations(self) -> list[dict]:
        with self._lock:
            rows = self._db.execute(
                "SELECT * FROM continuations WHERE done = 0 ORDER BY seq").fetchall()
        return [dict(r) for r in rows]

    def inflight_delta(self, activity_id, delta) -> int:
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO activity_counters (activity_id, inflight) VALUES (?, 0)"
                " ON CONFLICT (activity_id) DO NOTHING", (activity_id,))
            self._db.execute(
                "UPDATE activity_counters SET inflight = inflight + ? WHERE activity_id = ?",
                (delta, activity_id))
            row = self._db.execute(
                "SELECT inflight FROM activity_counters WHERE activity_id = ?",
                (activity_id,)).fetchone()
        return row["inflight"]

    def mark_terminal_fired(self, activity_id):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO activity_counters (activity_id, inflight, terminal_fired)"
                " VALUES (?, 0, 1) ON CONFLICT (activity_id)"
                " DO UPDATE SET terminal_fired = 1", (activity_id,))

    def activity_counters(self, activity_id) -> tuple[int, bool]:
        with self._lock:
            row = self._db.execute(
                "SELECT inflight, terminal_fired FROM activity_counters"
                " WHERE activity_id = ?", (activity_id,)).fetchone()
        if row is None:
            return 0, False
        return row["inflight"], bool(row["terminal_fired"])

    # -- misc -----------------------------------------------------------------

    def kv_get(self, key, default=None):
        with self._lock:
            row = self._db.execute("SELECT value FROM kv WHERE key = ?", (key,)).fetchone()
        return row["value"] if row else default

    def kv_set(self, key, value):
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO kv (key, value) VALUES (?, ?)"
                " ON CONFLICT (key) DO UPDATE SET value = excluded.value", (key, value))

    def check_integrity(self) -> list[str]:
        """Full-store referential scan; returns human-readable violations."""
        problems = []
        with self._lock:
            rows = self._db.execute(
                "SELECT j.job_id FROM jobs j LEFT JOIN activities a"
                " ON j.activity_id = a.activity_id WHERE a.activity_id IS NULL").fetchall()
            problems += [f"job {r['job_id']} has dangling activity" for r in rows]
            rows = self._db.execute(
                "SELECT j.job_id FROM jobs j LEFT JOIN machines m"
                " ON j.machine_id = m.machine_id WHERE m.machine_id IS NULL").fetchall()
            problems += [f"job {r['job_id']} has dangling machine" for r in rows]
        return problems
