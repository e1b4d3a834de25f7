"""Batch-scheduler text handling for PBS and Slurm.

Renders submit commands from a scheduler-agnostic job description and
parses scheduler output (submit replies, full queue listings) back into
normalized records.  Everything here is a pure function of its inputs.

Expected queue-listing formats:

* PBS: ``qstat -f`` blocks, ``Job Id: <id>`` header then indented
  ``key = value`` lines (long values wrap onto tab-indented lines).
* Slurm: ``squeue`` pipe-delimited lines in the field order
  ``%i|%j|%u|%T|%M|%l|%D|%P``.
"""

import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import InvalidArgument, ParseError, Unsupported


class Scheduler(str, Enum):
    PBS = "pbs"
    SLURM = "slurm"


class JobState(str, Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    HELD = "HELD"
    EXITING = "EXITING"
    UNKNOWN = "UNKNOWN"


_JOB_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")
_QSUB_ID_RE = re.compile(r"^\d+(\[\d*\])?(\.[A-Za-z0-9._-]+)?$")
_SBATCH_REPLY_RE = re.compile(r"Submitted batch job (\d+)")

# Unrecognized scheduler states map to UNKNOWN so a live poller survives
# scheduler-version drift instead of failing the whole snapshot.
_PBS_STATES = {"Q": JobState.QUEUED, "R": JobState.RUNNING,
               "H": JobState.HELD, "E": JobState.EXITING}
_SLURM_STATES = {"PENDING": JobState.QUEUED, "RUNNING": JobState.RUNNING,
                 "SUSPENDED": JobState.HELD, "COMPLETING": JobState.EXITING}


@dataclass
class SubmitSpec:
    """Scheduler-agnostic description of one batch job."""

    nodes: int
    walltime_req_s: int
    account: str
    queue: str
    script_path: str
    job_name: str

    def validate(self):
        if self.nodes < 1:
            raise InvalidArgument(f"nodes must be >= 1, got {self.nodes}")
        if self.walltime_req_s < 1:
            raise InvalidArgument(f"walltime_req_s must be >= 1, got {self.walltime_req_s}")
        if not _JOB_NAME_RE.match(self.job_name):
            raise InvalidArgument(f"bad job name {self.job_name!r}")


@dataclass
class QueueEntry:
    """One normalized job as seen in a machine's queue listing."""

    batch_id: str
    queue: str
    state: JobState
    nodes: int
    walltime_req_s: int
    owner: str
    elapsed_s: int | None = None  # present iff state == RUNNING


@dataclass
class QueueParse:
    """Result of parsing one queue listing.

    ``errors`` holds at most one ParseError (parsing stops at the first
    structurally malformed block; entries before it are kept).
    ``elapsed_fallback_used`` is set when a RUNNING job carried no elapsed
    time and 0 was assumed.
    """

    entries: list[QueueEntry] = field(default_factory=list)
    errors: list[ParseError] = field(default_factory=list)
    elapsed_fallback_used: bool = False


def seconds_to_hms(total_s: int) -> str:
    """Format seconds as HH:MM:SS; hours may exceed two digits."""
    if total_s < 0:
        raise InvalidArgument(f"negative duration {total_s}")
    h, rem = divmod(int(total_s), 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def hms_to_seconds(text: str) -> int:
    """Parse HH:MM:SS (hours unbounded) into seconds."""
    m = re.match(r"^(\d+):([0-5]?\d):([0-5]?\d)$", text.strip())
    if not m:
        raise ParseError(f"bad HH:MM:SS duration {text!r}", raw=text)
    h, mi, s = (int(g) for g in m.groups())
    return h * 3600 + mi * 60 + s


def slurm_duration_to_seconds(text: str) -> int:
    """Parse a squeue elapsed/limit field.

    Accepts ``D-HH:MM:SS``, ``HH:MM:SS``, and ``MM:SS`` (the compact form
    squeue uses for %M under an hour).
    """
    text = text.strip()
    days = 0
    if "-" in text:
        day_part, text = text.split("-", 1)
        if not day_part.isdigit():
            raise ParseError(f"bad slurm duration {text!r}", raw=text)
        days = int(day_part)
    parts = text.split(":")
    if not all(p.isdigit() for p in parts):
        raise ParseError(f"bad slurm duration {text!r}", raw=text)
    if len(parts) == 3:
        h, m, s = (int(p) for p in parts)
    elif len(parts) == 2:
        h, (m, s) = 0, (int(parts[0]), int(parts[1]))
    else:
        raise ParseError(f"bad slurm duration {text!r}", raw=text)
    return ((days * 24 + h) * 60 + m) * 60 + s


def seconds_to_slurm_elapsed(total_s: int) -> str:
    """Format seconds the way squeue prints %M: M:SS, H:MM:SS, or D-HH:MM:SS."""
    d, rem = divmod(int(total_s), 86400)
    h, rem = divmod(rem, 3600)
    m, s = divmod(rem, 60)
    if d:
        return f"{d}-{h:02d}:{m:02d}:{s:02d}"
    if h:
        return f"{h}:{m:02d}:{s:02d}"
    return f"{m}:{s:02d}"


def render_submit(scheduler: Scheduler, spec: SubmitSpec) -> str:
    """Render the submit command for one scheduler dialect."""
    spec.validate()
    wall = seconds_to_hms(spec.walltime_req_s)
    if scheduler == Scheduler.PBS:
        return (f"qsub -N {spec.job_name} -q {spec.queue} -A {spec.account}"
                f" -l select={spec.nodes},walltime={wall} {spec.script_path}")
    if scheduler == Scheduler.SLURM:
        return (f"sbatch --job-name={spec.job_name} --partition={spec.queue}"
                f" --account={spec.account} --nodes={spec.nodes}"
                f" --time={wall} {spec.script_path}")
    raise Unsupported(f"scheduler {scheduler!r}")


_QSUB_CMD_RE = re.compile(
    r"^qsub -N (?P<name>\S+) -q (?P<queue>\S+) -A (?P<account>\S+)"
    r" -l select=(?P<nodes>\d+),walltime=(?P<wall>\d+:\d\d:\d\d) (?P<script>\S+)$")
_SBATCH_CMD_RE = re.compile(
    r"^sbatch --job-name=(?P<name>\S+) --partition=(?P<queue>\S+)"
    r" --account=(?P<account>\S+) --nodes=(?P<nodes>\d+)"
    r" --time=(?P<wall>\d+:\d\d:\d\d) (?P<script>\S+)$")


def parse_submit_command(scheduler: Scheduler, command: str) -> SubmitSpec:
    """Re-extract a SubmitSpec from a rendered submit command.

    Inverse of :func:`render_submit`; also used by the machine simulator to
    accept submissions.
    """
    pattern = _QSUB_CMD_RE if scheduler == Scheduler.PBS else _SBATCH_CMD_RE
    m = pattern.match(command.strip())
    if not m:
        raise ParseError(f"unrecognized {scheduler.value} submit command", raw=command)
    return SubmitSpec(
        nodes=int(m.group("nodes")),
        walltime_req_s=hms_to_seconds(m.group("wall")),
        account=m.group("account"),
        queue=m.group("queue"),
        script_path=m.group("script"),
        job_name=m.group("name"),
    )


def parse_submit_reply(scheduler: Scheduler, stdout: str) -> str:
    """Extract the scheduler-assigned batch id from submit-command stdout."""
    if scheduler == Scheduler.PBS:
        for line in stdout.splitlines():
            line = line.strip()
            if not line:
                continue
            token = line.split()[0]
            if _QSUB_ID_RE.match(token):
                return token
            break
        raise ParseError("no PBS job id in submit reply", raw=stdout)
    if scheduler == Scheduler.SLURM:
        m = _SBATCH_REPLY_RE.search(stdout)
        if not m:
            raise ParseError("no 'Submitted batch job <id>' in submit reply", raw=stdout)
        return m.group(1)
    raise Unsupported(f"scheduler {scheduler!r}")


def render_cancel(scheduler: Scheduler, batch_id: str) -> str:
    if scheduler == Scheduler.PBS:
        return f"qdel {batch_id}"
    if scheduler == Scheduler.SLURM:
        return f"scancel {batch_id}"
    raise Unsupported(f"scheduler {scheduler!r}")


def render_status_command(scheduler: Scheduler) -> str:
    """The full-queue listing command polled on every machine."""
    if scheduler == Scheduler.PBS:
        return "qstat -f"
    if scheduler == Scheduler.SLURM:
        return 'squeue -h -o "%i|%j|%u|%T|%M|%l|%D|%P"'
    raise Unsupported(f"scheduler {scheduler!r}")


def parse_queue_status(scheduler: Scheduler, stdout: str) -> QueueParse:
    """Parse a full queue listing into normalized entries.

    Stops at the first structurally malformed block/line; well-formed
    entries before it are returned alongside the error.
    """
    if scheduler == Scheduler.PBS:
        return _parse_qstat_full(stdout)
    if scheduler == Scheduler.SLURM:
        return _parse_squeue(stdout)
    raise Unsupported(f"scheduler {scheduler!r}")


def _pbs_blocks(stdout: str):
    """Split qstat -f output into per-job blocks, unwrapping continuations."""
    blocks: list[list[str]] = []
    for raw in stdout.splitlines():
        if not raw.strip():
            continue
        if raw.startswith("Job Id:"):
            blocks.append([raw])
        elif raw.startswith(("\t", " " * 8)) and blocks and blocks[-1][1:]:
            # qstat wraps long values onto deep-indented lines
            blocks[-1][-1] += raw.strip()
        elif blocks:
            blocks[-1].append(raw)
        else:
            blocks.append([raw])  # leading junk: surfaces as a malformed block
    return blocks


def _parse_qstat_full(stdout: str) -> QueueParse:
    result = QueueParse()
    for block in _pbs_blocks(stdout):
        header = block[0]
        if not header.startswith("Job Id:"):
            result.errors.append(ParseError(
                f"expected 'Job Id:' header, got {header.strip()!r}", raw="\n".join(block)))
            return result
        batch_id = header.split(":", 1)[1].strip()
        attrs = {}
        for line in block[1:]:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            attrs[key.strip()] = value.strip()
        try:
            entry = _pbs_entry(batch_id, attrs)
        except (ParseError, KeyError, ValueError) as exc:
            result.errors.append(ParseError(
                f"malformed qstat block for job {batch_id}: {exc}", raw="\n".join(block)))
            return result
        if entry.state == JobState.RUNNING and "resources_used.walltime" not in attrs:
            result.elapsed_fallback_used = True
        result.entries.append(entry)
    return result


def _pbs_entry(batch_id: str, attrs: dict) -> QueueEntry:
    state = _PBS_STATES.get(attrs["job_state"], JobState.UNKNOWN)
    elapsed = None
    if state == JobState.RUNNING:
        # Sites that hide other users' resource usage omit this key; treat
        # elapsed as 0 and let the caller flag the fallback.
        elapsed = hms_to_seconds(attrs.get("resources_used.walltime", "00:00:00"))
    return QueueEntry(
        batch_id=batch_id,
        queue=attrs["queue"],
        state=state,
        nodes=int(attrs["Resource_List.nodect"]),
        walltime_req_s=hms_to_seconds(attrs["Resource_List.walltime"]),
        owner=attrs.get("Job_Owner", "").split("@")[0],
        elapsed_s=elapsed,
    )


def _parse_squeue(stdout: str) -> QueueParse:
    result = QueueParse()
    for line in stdout.splitlines():
        line = line.strip()
        if not line:
            continue
        fields = line.split("|")
        if len(fields) != 8:
            result.errors.append(ParseError(
                f"expected 8 pipe-delimited fields, got {len(fields)}", raw=line))
            return result
        batch_id, _name, owner, state_s, elapsed_s, limit_s, nodes_s, partition = fields
        try:
            state = _SLURM_STATES.get(state_s, JobState.UNKNOWN)
            entry = QueueEntry(
                batch_id=batch_id,
                queue=partition,
                state=state,
                nodes=int(nodes_s),
                walltime_req_s=slurm_duration_to_seconds(limit_s),
                owner=owner.split("@")[0],
                elapsed_s=slurm_duration_to_seconds(elapsed_s) if state == JobState.RUNNING else None,
            )
        except (ParseError, ValueError) as exc:
            result.errors.append(ParseError(f"malformed squeue line: {exc}", raw=line))
            return result
        result.entries.append(entry)
    return result
