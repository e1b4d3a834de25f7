"""Discrete-event simulation of batch-scheduled HPC machines.

Each simulated machine accepts submit/status/cancel commands in its
scheduler's dialect (PBS or Slurm), runs a FIFO node scheduler on a
virtual integer-second clock, renders status output byte-compatible with
the real schedulers' formats, and injects outages from configured
windows.  Stands in for production machines so the whole control plane is
verifiable at desk scale.

Determinism: given the same config, seed, and command/advance sequence,
the event log and every rendered output are identical byte for byte.  The
only randomness is the actual-runtime draw at submit time.
"""

import hashlib
import posixpath
import random
import shlex
import threading
import time
from dataclasses import dataclass, field

from . import batch
from .batch import Scheduler
from .errors import InvalidArgument, MachineUnreachable, NotFound, ParseError


@dataclass
class RuntimeFraction:
    """Distribution of actual runtime as a fraction of requested walltime."""

    kind: str = "fixed"  # "fixed" | "uniform"
    value: float = 1.0
    lo: float = 0.5
    hi: float = 1.0

    def validate(self):
        if self.kind == "fixed":
            if self.value <= 0:
                raise InvalidArgument("fixed runtime fraction must be > 0")
        elif self.kind == "uniform":
            if not 0 < self.lo <= self.hi <= 1:
                raise InvalidArgument("uniform runtime fraction needs 0 < lo <= hi <= 1")
        else:
            raise InvalidArgument(f"unknown runtime fraction kind {self.kind!r}")

    def draw(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return self.value
        return rng.uniform(self.lo, self.hi)


@dataclass
class SimMachineConfig:
    name: str
    scheduler: Scheduler
    nodes: int
    clock_rate: float = 1.0  # virtual seconds per wall second
    runtime_fraction: RuntimeFraction = field(default_factory=RuntimeFraction)
    outage_windows: list = field(default_factory=list)  # [start_s, end_s) virtual
    seed: int = 0
    backfill: bool = False


@dataclass
class SimJob:
    batch_id: str
    name: str
    owner: str
    queue: str
    nodes: int
    walltime_req_s: int
    actual_runtime_s: int
    script_path: str
    state: str = "QUEUED"  # QUEUED | RUNNING | DONE | KILLED | CANCELLED
    submit_t: int = 0
    start_t: int | None = None
    end_t: int | None = None


@dataclass
class SimEvent:
    at: int
    batch_id: str
    kind: str  # START | COMPLETE | KILLED | CANCELLED


@dataclass
class CommandResult:
    exit_code: int
    stdout: str
    stderr: str


class SimMachine:
    """One batch-scheduled machine on a virtual clock."""

    def __init__(self, config: SimMachineConfig, valid_accounts=None):
        config.runtime_fraction.validate()
        if config.nodes < 1:
            raise InvalidArgument("machine needs at least one node")
        self.config = config
        self.clock = 0
        self.jobs: dict[str, SimJob] = {}
        self.files: dict[str, bytes] = {}
        self.event_log: list[SimEvent] = []
        self.valid_accounts = valid_accounts
        self._rng = random.Random(config.seed)
        self._serial = 0
        # Commands against one machine are serialized, like a login session.
        self._lock = threading.RLock()

    # -- command surface -----------------------------------------------------

    def in_outage(self, at=None) -> bool:
        t = self.clock if at is None else at
        return any(start <= t < end for start, end in self.config.outage_windows)

    def handle_command(self, command: str, user="svc") -> CommandResult:
        """Execute one scheduler command; exit 255 during an outage."""
        with self._lock:
            if self.in_outage():
                return CommandResult(255, "", "")
            try:
                argv = shlex.split(command)
            except ValueError:
                argv = []
            if not argv:
                return CommandResult(1, "", "empty command")
            tool = argv[0]
            if self.config.scheduler == Scheduler.PBS:
                handlers = {"qsub": self._submit, "qstat": self._status,
                            "qdel": self._cancel}
            else:
                handlers = {"sbatch": self._submit, "squeue": self._status,
                            "scancel": self._cancel}
            handler = handlers.get(tool)
            if handler is None:
                return CommandResult(127, "", f"{tool}: command not found")
            return handler(command, argv, user)

    def _submit(self, command, argv, user) -> CommandResult:
        sched = self.config.scheduler
        try:
            spec = batch.parse_submit_command(sched, command)
        except ParseError as exc:
            tool = "qsub" if sched == Scheduler.PBS else "sbatch"
            return CommandResult(1, "", f"{tool}: error: {exc}")
        if spec.nodes > self.config.nodes:
            if sched == Scheduler.PBS:
                return CommandResult(1, "", "qsub: Job exceeds queue resource limits")
            return CommandResult(
                1, "", "sbatch: error: Batch job submission failed: "
                       "Requested node configuration is not available")
        if self.valid_accounts is not None and spec.account not in self.valid_accounts:
            if sched == Scheduler.PBS:
                return CommandResult(1, "", f"qsub: error: invalid account {spec.account!r}")
            return CommandResult(1, "", f"sbatch: error: invalid account {spec.account!r}")

        self._serial += 1
        batch_id = (f"{self._serial}.sim" if sched == Scheduler.PBS
                    else str(self._serial))
        fraction = self.config.runtime_fraction.draw(self._rng)
        actual = max(1, round(fraction * spec.walltime_req_s))
        job = SimJob(
            batch_id=batch_id, name=spec.job_name, owner=user, queue=spec.queue,
            nodes=spec.nodes, walltime_req_s=spec.walltime_req_s,
            actual_runtime_s=actual, script_path=spec.script_path,
            submit_t=self.clock)
        self.jobs[batch_id] = job
        self._start_eligible()
        stdout = f"{batch_id}\n" if sched == Scheduler.PBS else f"Submitted batch job {batch_id}\n"
        return CommandResult(0, stdout, "")

    def _status(self, command, argv, user) -> CommandResult:
        if self.config.scheduler == Scheduler.PBS and "-f" not in argv:
            return CommandResult(1, "", "qstat: invalid option")
        return CommandResult(0, self.render_status(), "")

    def _cancel(self, command, argv, user) -> CommandResult:
        if len(argv) < 2:
            return CommandResult(1, "", "usage: cancel <job id>")
        job = self.jobs.get(argv[1])
        if job is None or job.state in ("DONE", "KILLED", "CANCELLED"):
            return CommandResult(0, "", "")  # idempotent: already gone
        job.state = "CANCELLED"
        job.end_t = self.clock
        self.event_log.append(SimEvent(self.clock, job.batch_id, "CANCELLED"))
        self._start_eligible()
        return CommandResult(0, "", "")

    # -- virtual filesystem ----------------------------------------------------

    def stage_file(self, path, data: bytes):
        with self._lock:
            if self.in_outage():
                raise MachineUnreachable(f"{self.config.name} is in an outage window")
            self.files[path] = bytes(data)

    def read_file(self, path) -> bytes:
        with self._lock:
            if self.in_outage():
                raise MachineUnreachable(f"{self.config.name} is in an outage window")
            if path not in self.files:
                raise NotFound(f"no file {path!r} on {self.config.name}")
            return self.files[path]

    # -- clock ------------------------------------------------------------------

    def advance(self, dt_virtual_s) -> list[SimEvent]:
        """Advance the virtual clock, returning the transitions that occurred."""
        if dt_virtual_s < 0:
            raise InvalidArgument("cannot advance backwards")
        with self._lock:
            mark = len(self.event_log)
            target = self.clock + int(dt_virtual_s)
            self._start_eligible()
            while True:
                running = [j for j in self.jobs.values() if j.state == "RUNNING"]
                next_end = min((j.end_t for j in running), default=None)
                if next_end is None or next_end > target:
                    break
                self.clock = next_end
                for job in self._submit_ordered():
                    if job.state == "RUNNING" and job.end_t == self.clock:
                        self._finish(job)
                self._start_eligible()
            self.clock = target
            return self.event_log[mark:]

    def _finish(self, job: SimJob):
        if job.actual_runtime_s > job.walltime_req_s:
            job.state = "KILLED"
            self.event_log.append(SimEvent(self.clock, job.batch_id, "KILLED"))
            return
        job.state = "DONE"
        self.event_log.append(SimEvent(self.clock, job.batch_id, "COMPLETE"))
        # Deterministic output so end-to-end result fetching is verifiable:
        # the digest of the staged script (which embeds any ensemble index)
        # plus the job name.
        script = self.files.get(job.script_path, b"")
        digest = hashlib.sha256(script).hexdigest()
        out_path = posixpath.join(posixpath.dirname(job.script_path) or "/", "out.dat")
        self.files[out_path] = f"{digest} {job.name}\n".encode()

    def _submit_ordered(self):
        return sorted(self.jobs.values(), key=lambda j: (j.submit_t, self._ordinal(j)))

    @staticmethod
    def _ordinal(job: SimJob) -> int:
        return int(job.batch_id.split(".")[0])

    def free_nodes(self) -> int:
        used = sum(j.nodes for j in self.jobs.values() if j.state == "RUNNING")
        return self.config.nodes - used

    def _start_eligible(self):
        free = self.free_nodes()
        for job in self._submit_ordered():
            if job.state != "QUEUED":
                continue
            if job.nodes <= free:
                job.state = "RUNNING"
                job.start_t = self.clock
                job.end_t = self.clock + min(job.actual_runtime_s, job.walltime_req_s)
                free -= job.nodes
                self.event_log.append(SimEvent(self.clock, job.batch_id, "START"))
            elif not self.config.backfill:
                break  # strict FIFO: a blocked head blocks everything behind it

    # -- rendering ----------------------------------------------------------------

    def render_status(self) -> str:
        with self._lock:
            return self._render_status_locked()

    def _render_status_locked(self) -> str:
        live = [j for j in self._submit_ordered() if j.state in ("QUEUED", "RUNNING")]
        if self.config.scheduler == Scheduler.PBS:
            blocks = []
            for j in live:
                lines = [
                    f"Job Id: {j.batch_id}",
                    f"    Job_Name = {j.name}",
                    f"    Job_Owner = {j.owner}@{self.config.name}",
                    f"    job_state = {'R' if j.state == 'RUNNING' else 'Q'}",
                    f"    queue = {j.queue}",
                    f"    Resource_List.nodect = {j.nodes}",
                    f"    Resource_List.walltime = {batch.seconds_to_hms(j.walltime_req_s)}",
                ]
                if j.state == "RUNNING":
                    elapsed = self.clock - j.start_t
                    lines.append(
                        f"    resources_used.walltime = {batch.seconds_to_hms(elapsed)}")
                blocks.append("\n".join(lines))
            return ("\n\n".join(blocks) + "\n") if blocks else ""
        lines = []
        for j in live:
            if j.state == "RUNNING":
                state, elapsed = "RUNNING", self.clock - j.start_t
            else:
                state, elapsed = "PENDING", 0
            lines.append("|".join([
                j.batch_id, j.name, j.owner, state,
                batch.seconds_to_slurm_elapsed(elapsed),
                batch.seconds_to_slurm_elapsed(j.walltime_req_s),
                str(j.nodes), j.queue]))
        return ("\n".join(lines) + "\n") if lines else ""


class SimCluster:
    """A set of simulated machines, optionally driven by the wall clock."""

    def __init__(self, configs: list[SimMachineConfig], realtime=False,
                 valid_accounts=None):
        names = [c.name for c in configs]
        if len(set(names)) != len(names):
            raise InvalidArgument("duplicate simulator machine names")
        self.machines = {c.name: SimMachine(c, valid_accounts) for c in configs}
        self.realtime = realtime
        self._wall_last = {name: time.monotonic() for name in self.machines}

    def machine(self, name) -> SimMachine:
        m = self.machines.get(name)
        if m is None:
            raise NotFound(f"no simulated machine {name!r}")
        return m

    def sync(self, name):
        """Advance one machine's virtual clock from the wall clock."""
        m = self.machine(name)
        with m._lock:
            now = time.monotonic()
            dt_virtual = int((now - self._wall_last[name]) * m.config.clock_rate)
            if dt_virtual > 0:
                m.advance(dt_virtual)
                self._wall_last[name] += dt_virtual / m.config.clock_rate
        return m

    def run_command(self, name, command, user="svc") -> CommandResult:
        m = self.sync(name) if self.realtime else self.machine(name)
        return m.handle_command(command, user=user)

    def stage_file(self, name, path, data: bytes):
        m = self.sync(name) if self.realtime else self.machine(name)
        m.stage_file(path, data)

    def read_file(self, name, path) -> bytes:
        m = self.sync(name) if self.realtime else self.machine(name)
        return m.read_file(path)

    def advance_all(self, dt_virtual_s) -> dict[str, list[SimEvent]]:
        return {name: m.advance(dt_virtual_s) for name, m in self.machines.items()}
