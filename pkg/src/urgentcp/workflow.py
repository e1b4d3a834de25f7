"""Workflow engine: registered stage graphs driven by broker messages.

Activities progress by producing and consuming durable queue messages,
one queue per (workflow, stage).  The engine supports the four things an
urgent-computing workflow runner has to do: run independent parts of one
activity concurrently, run many activities concurrently and
independently, progress promptly, and branch on conditions over the
carried context.

Execution model
---------------
* Publishing into a stage sends one message per fan-out branch
  (``ensemble.index`` = 0..n-1 for stages with ``params.fan_out``).
* A stage with k expected arrivals (sum of incoming-edge multiplicities)
  fires once per activity, after the k-th arrival; arrival contexts are
  merged in arrival order.  Barrier state is persisted so joins survive
  restarts; arrivals are deduplicated by a logical branch key, so message
  redelivery never double-counts.
* SUBMIT_JOB stages pick a machine by estimated queue wait, create and
  submit the job, and persist a continuation; the job's completion event
  later merges result handles into the context and fires outgoing edges.
  Continuations are unique per (activity, stage, branch), which bounds
  duplicate submissions under crash replay.
* Every outgoing edge whose condition is absent or true fires; branches
  are not required to be exclusive.  A condition referring to a missing
  context field routes the message to ``wf.<id>.error`` with diagnostics.
"""

import json
import logging
import re
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum

from . import predicates
from .batch import SubmitSpec
from .broker import MAX_DELIVERIES, Broker, Message
from .errors import (ControlPlaneError, CyclicWorkflow, InvalidArgument,
                     InvalidTransition, MachineUnreachable, MissingField,
                     NoEligibleMachine, NotFound, PartialFetch)
from .machines import MachineService, job_workdir
from .status import StatusService
from .store import ActivityStatus, JobStatus, StateStore

log = logging.getLogger(__name__)

_NAME_RE = re.compile(r"^[a-z0-9_-]+$")
_VAR_RE = re.compile(r"\$\{([^}]+)\}")

DEFAULT_OUTPUTS = ["out.dat"]


class StageKind(str, Enum):
    SUBMIT_JOB = "SUBMIT_JOB"
    TRANSFER = "TRANSFER"
    PROCESS = "PROCESS"
    DECISION = "DECISION"
    TERMINAL = "TERMINAL"


@dataclass
class Stage:
    name: str
    kind: StageKind
    params: dict = field(default_factory=dict)

    @property
    def fan_out(self) -> int | None:
        return self.params.get("fan_out")


@dataclass
class Edge:
    from_stage: str
    to_stage: str
    condition: str | None = None


@dataclass
class Trigger:
    kind: str  # MANUAL | SENSOR
    sensor_type: str | None = None


@dataclass
class WorkflowDefinition:
    workflow_id: str
    entry_stage: str
    stages: list
    edges: list
    triggers: list = field(default_factory=list)
    kind: str = ""  # activity tag, e.g. "wildfire"; defaults to workflow_id

    def __post_init__(self):
        if not self.kind:
            self.kind = self.workflow_id

    def stage(self, name) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise NotFound(f"stage {name!r} in workflow {self.workflow_id!r}")

    def edges_from(self, name) -> list[Edge]:
        return [e for e in self.edges if e.from_stage == name]

    def edges_into(self, name) -> list[Edge]:
        return [e for e in self.edges if e.to_stage == name]

    def stage_queue(self, stage_name) -> str:
        return f"wf.{self.workflow_id}.{stage_name}"

    def error_queue(self) -> str:
        return f"wf.{self.workflow_id}.error"

    def expected_arrivals(self, stage_name) -> int:
        """Join width: one arrival per incoming edge, times the source's
        fan-out when the source stage fans out."""
        total = 0
        for edge in self.edges_into(stage_name):
            src = self.stage(edge.from_stage)
            total += src.fan_out or 1
        return max(1, total)

    def validate(self):
        if not _NAME_RE.match(self.workflow_id):
            raise InvalidArgument(f"bad workflow id {self.workflow_id!r}")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise InvalidArgument("duplicate stage names")
        for s in self.stages:
            if not _NAME_RE.match(s.name):
                raise InvalidArgument(f"bad stage name {s.name!r}")
            if s.fan_out is not None:
                if s.kind != StageKind.SUBMIT_JOB:
                    raise InvalidArgument(
                        f"fan_out only applies to SUBMIT_JOB stages, not {s.name}")
                if not isinstance(s.fan_out, int) or s.fan_out < 1:
                    raise InvalidArgument(f"fan_out must be a positive int on {s.name}")
        known = set(names)
        if self.entry_stage not in known:
            raise InvalidArgument(f"entry stage {self.entry_stage!r} does not exist")
        for e in self.edges:
            if e.from_stage not in known or e.to_stage not in known:
                raise InvalidArgument(f"edge {e.from_stage}->{e.to_stage} references unknown stage")
            if self.stage(e.from_stage).kind == StageKind.TERMINAL:
                raise InvalidArgument(f"TERMINAL stage {e.from_stage} cannot have outgoing edges")
            if e.condition is not None:
                predicates.parse(e.condition)  # raises PredicateSyntax
        self._check_acyclic()
        self._check_reachable()
        for t in self.triggers:
            if t.kind not in ("MANUAL", "SENSOR"):
                raise InvalidArgument(f"bad trigger kind {t.kind!r}")
            if t.kind == "SENSOR" and not t.sensor_type:
                raise InvalidArgument("SENSOR trigger needs a sensor_type")

    def _check_acyclic(self):
        indegree = {s.name: 0 for s in self.stages}
        for e in self.edges:
            indegree[e.to_stage] += 1
        ready = [n for n, d in indegree.items() if d == 0]
        seen = 0
        while ready:
            node = ready.pop()
            seen += 1
            for e in self.edges_from(node):
                indegree[e.to_stage] -= 1
                if indegree[e.to_stage] == 0:
                    ready.append(e.to_stage)
        if seen != len(self.stages):
            raise CyclicWorkflow(f"workflow {self.workflow_id!r} has a cycle")

    def _check_reachable(self):
        seen = {self.entry_stage}
        frontier = [self.entry_stage]
        while frontier:
            node = frontier.pop()
            for e in self.edges_from(node):
                if e.to_stage not in seen:
                    seen.add(e.to_stage)
                    frontier.append(e.to_stage)
        unreachable = {s.name for s in self.stages} - seen
        if unreachable:
            raise InvalidArgument(f"stages unreachable from entry: {sorted(unreachable)}")

    def to_json(self) -> str:
        return json.dumps({
            "workflow_id": self.workflow_id,
            "kind": self.kind,
            "entry_stage": self.entry_stage,
            "stages": [{"name": s.name, "kind": s.kind.value, "params": s.params}
                       for s in self.stages],
            "edges": [{"from": e.from_stage, "to": e.to_stage,
                       **({"condition": e.condition} if e.condition else {})}
                      for e in self.edges],
            "triggers": [{"kind": t.kind,
                          **({"sensor_type": t.sensor_type} if t.sensor_type else {})}
                         for t in self.triggers],
        }, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkflowDefinition":
        try:
            stages = [Stage(name=s["name"], kind=StageKind(s["kind"]),
                            params=s.get("params", {})) for s in doc["stages"]]
            edges = [Edge(from_stage=e["from"], to_stage=e["to"],
                          condition=e.get("condition")) for e in doc.get("edges", [])]
            triggers = [Trigger(kind=t["kind"], sensor_type=t.get("sensor_type"))
                        for t in doc.get("triggers", [])]
            return cls(workflow_id=doc["workflow_id"], entry_stage=doc["entry_stage"],
                       stages=stages, edges=edges, triggers=triggers,
                       kind=doc.get("kind", ""))
        except (KeyError, ValueError) as exc:
            raise InvalidArgument(f"malformed workflow document: {exc}")

    @classmethod
    def from_json(cls, text: str) -> "WorkflowDefinition":
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise InvalidArgument(f"workflow document is not valid JSON: {exc}")
        return cls.from_dict(doc)


def substitute(template: str, context: dict) -> str:
    """Replace ``${path}`` references with context values."""
    def repl(m):
        path = m.group(1)
        if path not in context:
            raise MissingField(path)
        return str(context[path])
    return _VAR_RE.sub(repl, template)


class WorkflowEngine:
    def __init__(self, store: StateStore, broker: Broker,
                 machine_service: MachineService, status_service: StatusService):
        self.store = store
        self.broker = broker
        self.machines = machine_service
        self.status = status_service
        self.definitions: dict[str, WorkflowDefinition] = {}
        self._placement_lock = threading.Lock()

    # -- registration -----------------------------------------------------------

    def register_workflow(self, definition: WorkflowDefinition) -> str:
        """Validate, persist, declare stage queues, and install consumers."""
        definition.validate()
        self.store.save_workflow(definition.workflow_id, definition.to_json())
        self._install(definition)
        return definition.workflow_id

    def resume(self):
        """Re-install persisted workflows after a restart and re-drive any
        continuations whose jobs finished while the engine was down."""
        for workflow_id in self.store.list_workflow_ids():
            definition = WorkflowDefinition.from_json(
                self.store.get_workflow_json(workflow_id))
            self._install(definition)
        for cont in self.store.open_continuations():
            if not cont["job_id"]:
                continue
            try:
                job = self.store.get_job(cont["job_id"])
            except NotFound:
                continue
            if job.status == JobStatus.COMPLETED:
                self.on_job_event(job.job_id, JobStatus.COMPLETED)
            elif job.status == JobStatus.ERROR:
                self.on_job_event(job.job_id, JobStatus.ERROR)

    def _install(self, definition: WorkflowDefinition):
        if definition.workflow_id in self.definitions:
            self.definitions[definition.workflow_id] = definition
            return
        self.definitions[definition.workflow_id] = definition
        self.broker.declare_queue(definition.error_queue(), durable=True)
        for stage in definition.stages:
            queue = definition.stage_queue(stage.name)
            self.broker.declare_queue(queue, durable=True)
            self.broker.consume(queue, self._handler(definition.workflow_id), prefetch=4)

    # -- activity lifecycle --------------------------------------------------------

    def start_activity(self, workflow_id, initial_context=None, origin="MANUAL") -> str:
        definition = self.definitions.get(workflow_id)
        if definition is None:
            raise NotFound(f"workflow {workflow_id!r} not registered")
        context = dict(initial_context or {})
        activity = self.store.create_activity(
            definition.kind, workflow_id, metadata={"origin": origin})
        self.store.update_activity_status(activity.activity_id, ActivityStatus.ACTIVE)
        entry = definition.stage(definition.entry_stage)
        self._publish_stage(definition, entry, activity.activity_id, context, "entry:0")
        return activity.activity_id

    def cancel_activity(self, activity_id):
        """Cancel every non-terminal job and mark the activity CANCELLED."""
        activity = self.store.get_activity(activity_id)
        if activity.status in (ActivityStatus.COMPLETED, ActivityStatus.ERROR,
                               ActivityStatus.CANCELLED):
            return
        if activity.status == ActivityStatus.PENDING:
            self.store.update_activity_status(activity_id, ActivityStatus.ACTIVE)
        self.store.update_activity_status(activity_id, ActivityStatus.CANCELLED)
        for job in self.store.query_jobs(activity_id=activity_id):
            if job.status in (JobStatus.COMPLETED, JobStatus.ERROR, JobStatus.CANCELLED):
                continue
            try:
                self.machines.cancel_job(job.job_id)
            except (MachineUnreachable, ControlPlaneError):
                # The machine may be unreachable; record our intent anyway.
                try:
                    self.store.update_job_status(job.job_id, JobStatus.CANCELLED)
                except InvalidTransition:
                    pass

    def eval_condition(self, expression, context) -> bool:
        return predicates.evaluate(expression, context)

    def on_sensor_trigger(self, sensor_type, envelope_meta: dict):
        """Start every workflow that declares a SENSOR trigger for this type."""
        started = []
        for definition in self.definitions.values():
            for trigger in definition.triggers:
                if trigger.kind == "SENSOR" and trigger.sensor_type == sensor_type:
                    context = {f"sensor.{k}": v for k, v in envelope_meta.items()}
                    started.append(self.start_activity(
                        definition.workflow_id, context, origin="SENSOR"))
        return started

    # -- message processing ----------------------------------------------------------

    def _handler(self, workflow_id):
        def handle(msg: Message):
            definition = self.definitions[workflow_id]
            payload = json.loads(msg.payload)
            activity_id = payload["activity_id"]
            stage = definition.stage(payload["stage"])
            try:
                activity = self.store.get_activity(activity_id)
            except NotFound:
                self.broker.ack(msg.message_id)
                return
            if activity.status != ActivityStatus.ACTIVE:
                self.broker.ack(msg.message_id)
                self._finish_message(activity_id)
                return
            try:
                self.advance(definition, stage, payload)
            except MissingField as exc:
                self._route_error(definition, activity_id, stage.name,
                                  f"missing context field {exc.path!r}", payload["context"])
                self.broker.ack(msg.message_id)
                self._finish_message(activity_id)
                return
            except Exception as exc:
                if msg.delivery_count >= MAX_DELIVERIES:
                    self._route_error(definition, activity_id, stage.name,
                                      f"stage failed after {msg.delivery_count} attempts: {exc}",
                                      payload["context"])
                    self.broker.ack(msg.message_id)
                    self._finish_message(activity_id)
                    return
                raise  # nacked by the consumer loop; retried or dead-lettered
            self.broker.ack(msg.message_id)
            self._finish_message(activity_id)
        return handle

    def advance(self, definition: WorkflowDefinition, stage: Stage, payload: dict) -> list:
        """Process one stage message; returns the messages it published."""
        activity_id = payload["activity_id"]
        context = payload["context"]
        if stage.kind == StageKind.SUBMIT_JOB:
            return self._advance_submit(definition, stage, activity_id, context, payload)
        barrier = self.store.barrier_arrive(
            activity_id, stage.name, payload.get("arrival", uuid.uuid4().hex),
            json.dumps(context, sort_keys=True),
            definition.expected_arrivals(stage.name))
        if not barrier["fired"] or barrier["executed"]:
            return []
        merged = json.loads(barrier["context"])
        if barrier["arrived"] > 1:
            merged.pop("ensemble.index", None)  # a join collapses branches
        if stage.kind == StageKind.TERMINAL:
            self.store.mark_terminal_fired(activity_id)
            self.store.mark_barrier_executed(activity_id, stage.name)
            return []
        if stage.kind == StageKind.TRANSFER:
            self._run_transfer(stage, merged)
        elif stage.kind == StageKind.PROCESS:
            for key, template in stage.params.get("set", {}).items():
                merged[key] = substitute(str(template), merged)
        # DECISION: routing only
        published = self._fire_edges(definition, stage, activity_id, merged)
        self.store.mark_barrier_executed(activity_id, stage.name)
        return published

    def _advance_submit(self, definition, stage, activity_id, context, payload) -> list:
        """SUBMIT_JOB arrival: join if needed, then place and submit one job
        per branch; edges fire later, from the job-completion event."""
        if stage.fan_out is None and definition.edges_into(stage.name):
            barrier = self.store.barrier_arrive(
                activity_id, stage.name, payload.get("arrival", uuid.uuid4().hex),
                json.dumps(context, sort_keys=True),
                definition.expected_arrivals(stage.name))
            if not barrier["fired"]:
                return []
            context = json.loads(barrier["context"])
            if barrier["arrived"] > 1:
                context.pop("ensemble.index", None)
        index = int(context.get("ensemble.index", 0))
        cont_seq, created = self.store.create_continuation(
            activity_id, stage.name, index, json.dumps(context, sort_keys=True))
        cont = self.store.get_continuation(cont_seq)
        if not created and (cont["job_id"] or cont["done"]):
            return []  # duplicate delivery of an already-submitted branch
        with self._placement_lock:
            self._place_and_submit(definition, stage, cont_seq)
        return []

    def _place_and_submit(self, definition, stage, cont_seq):
        """Pick a machine and submit the continuation's job.

        On NoEligibleMachine the continuation stays unplaced and is retried
        after the next poll round; on MachineUnreachable the job record
        stays PENDING_SUBMIT for the same retry path.
        """
        cont = self.store.get_continuation(cont_seq)
        if cont is None or cont["done"]:
            return
        activity_id = cont["activity_id"]
        context = json.loads(cont["context"])
        try:
            activity = self.store.get_activity(activity_id)
        except NotFound:
            return
        if activity.status != ActivityStatus.ACTIVE:
            self.store.mark_continuation_done(cont_seq)
            self.store.inflight_delta(activity_id, -1)
            return
        spec, script = self._render_spec(stage, context, activity_id, cont)
        job_id = cont["job_id"]
        if not job_id:
            try:
                machine_id = self.status.select_machine(spec.nodes, spec.walltime_req_s)
            except NoEligibleMachine:
                if cont["retries"] > 0:
                    self._fail_activity(activity_id, cont_seq,
                                        "no eligible machine for retry")
                return
            job = self.store.create_job(activity_id, machine_id,
                                        spec.nodes, spec.walltime_req_s)
            job_id = job.job_id
            self.store.attach_continuation_job(cont_seq, job_id)
            self.store.inflight_delta(activity_id, +1)
        else:
            job = self.store.get_job(job_id)
            if job.status != JobStatus.PENDING_SUBMIT:
                return
            try:
                machine_id = self.status.select_machine(spec.nodes, spec.walltime_req_s)
                if machine_id != job.machine_id:
                    self.store.place_job(job_id, machine_id)
            except NoEligibleMachine:
                return
        spec = self._respec_paths(spec, activity_id, job_id)
        try:
            self.machines.submit_job(job_id, spec, script)
            # Refresh the machine's snapshot so the next placement sees the
            # queue this submit just lengthened, not the pre-submit poll.
            self.status.poll_machine(machine_id)
        except MachineUnreachable:
            log.warning("machine unreachable while submitting %s; will re-place", job_id)
        except ControlPlaneError as exc:
            log.warning("submit of %s rejected: %s", job_id, exc)
            self.store.update_job_status(job_id, JobStatus.ERROR)
            self.on_job_event(job_id, JobStatus.ERROR)

    def _render_spec(self, stage, context, activity_id, cont) -> tuple[SubmitSpec, bytes]:
        params = stage.params
        def value(name, default=None):
            raw = params.get(name, default)
            if raw is None:
                raise MissingField(f"params.{name}")
            return substitute(str(raw), context)
        index = cont["ensemble_index"]
        spec = SubmitSpec(
            nodes=int(value("nodes", 1)),
            walltime_req_s=int(value("walltime_req_s", 3600)),
            account=value("account", "svc"),
            queue=value("queue", "standard"),
            script_path="run.sh",  # finalized once the job id is known
            job_name=value("job_name", f"{stage.name}-{index}"),
        )
        script_template = params.get("script", "#!/bin/sh\nexit 0\n")
        script = substitute(str(script_template), context).encode()
        return spec, script

    def _respec_paths(self, spec: SubmitSpec, activity_id, job_id) -> SubmitSpec:
        spec.script_path = f"{job_workdir(activity_id, job_id)}/run.sh"
        return spec

    # -- job events ---------------------------------------------------------------

    def on_job_event(self, job_id, new_status):
        """React to a job reaching a terminal state (from polling or resume)."""
        new_status = JobStatus(new_status)
        cont = self.store.find_continuation_by_job(job_id)
        if cont is None:
            log.info("job event for %s with no open continuation; dropped", job_id)
            return
        activity_id = cont["activity_id"]
        definition = self.definitions.get(
            self.store.get_activity(activity_id).workflow_id)
        if definition is None:
            log.warning("job event for %s but its workflow is not loaded", job_id)
            return
        stage = definition.stage(cont["stage"])
        if new_status == JobStatus.COMPLETED:
            self._continue_completed(definition, stage, cont)
        elif new_status == JobStatus.ERROR:
            self._retry_or_fail(definition, stage, cont)
        elif new_status == JobStatus.CANCELLED:
            self.store.mark_continuation_done(cont["seq"])
            self.store.inflight_delta(activity_id, -1)

    def _continue_completed(self, definition, stage, cont):
        activity_id = cont["activity_id"]
        job = self.store.get_job(cont["job_id"])
        context = json.loads(cont["context"])
        outputs = stage.params.get("outputs", DEFAULT_OUTPUTS)
        workdir = job_workdir(activity_id, job.job_id)
        try:
            handles = self.machines.fetch_results(
                job.job_id, [f"{workdir}/{name}" for name in outputs])
            uris = [h.uri for h in handles]
        except PartialFetch as exc:
            if not exc.ok:
                self._retry_or_fail(definition, stage, cont)
                return
            uris = list(exc.ok)
        index = cont["ensemble_index"]
        context[f"results.{stage.name}.{index}"] = uris
        context.pop("ensemble.index", None)
        published = self._fire_edges(definition, stage, activity_id, context,
                                     arrival_suffix=f":{index}")
        self.store.mark_continuation_done(cont["seq"])
        self.store.inflight_delta(activity_id, -1)
        self._maybe_complete(activity_id)
        return published

    def _retry_or_fail(self, definition, stage, cont):
        """One retry on a different machine, then the activity goes to ERROR."""
        activity_id = cont["activity_id"]
        retries = self.store.bump_continuation_retries(cont["seq"])
        if retries > 1:
            self._fail_activity(activity_id, cont["seq"],
                                f"stage {stage.name} failed after retry")
            return
        failed_machine = None
        if cont["job_id"]:
            failed_machine = self.store.get_job(cont["job_id"]).machine_id
        context = json.loads(cont["context"])
        spec, script = self._render_spec(stage, context, activity_id, cont)
        machines = [m for m in self.store.list_machines()
                    if m.machine_id != failed_machine]
        try:
            machine_id = self.status.select_machine(
                spec.nodes, spec.walltime_req_s, machines)
        except NoEligibleMachine:
            self._fail_activity(activity_id, cont["seq"],
                                f"no eligible machine to retry stage {stage.name}")
            return
        job = self.store.create_job(activity_id, machine_id, spec.nodes,
                                    spec.walltime_req_s)
        self.store.attach_continuation_job(cont["seq"], job.job_id)
        spec = self._respec_paths(spec, activity_id, job.job_id)
        try:
            self.machines.submit_job(job.job_id, spec, script)
            self.status.poll_machine(machine_id)
        except MachineUnreachable:
            log.warning("retry submit unreachable for %s; will re-place", job.job_id)
        except ControlPlaneError:
            self.store.update_job_status(job.job_id, JobStatus.ERROR)
            self._fail_activity(activity_id, cont["seq"],
                                f"retry submit rejected for stage {stage.name}")

    def _fail_activity(self, activity_id, cont_seq, reason):
        log.warning("activity %s failed: %s", activity_id, reason)
        self.store.mark_continuation_done(cont_seq)
        self.store.inflight_delta(activity_id, -1)
        try:
            self.store.update_activity_status(activity_id, ActivityStatus.ERROR)
        except (InvalidTransition, NotFound):
            pass

    def retry_pending_placements(self):
        """Called after each poll round: drive unplaced or unsubmitted work."""
        for cont in self.store.open_continuations():
            activity = self.store.get_activity(cont["activity_id"])
            if activity.status != ActivityStatus.ACTIVE:
                continue
            definition = self.definitions.get(activity.workflow_id)
            if definition is None:
                continue
            stage = definition.stage(cont["stage"])
            needs_placement = not cont["job_id"]
            if cont["job_id"]:
                job = self.store.get_job(cont["job_id"])
                needs_placement = job.status == JobStatus.PENDING_SUBMIT
            if needs_placement:
                with self._placement_lock:
                    self._place_and_submit(definition, stage, cont["seq"])

    # -- routing ------------------------------------------------------------------

    def _fire_edges(self, definition, stage, activity_id, context,
                    arrival_suffix="") -> list:
        published = []
        for edge_index, edge in enumerate(definition.edges_from(stage.name)):
            if edge.condition is not None:
                if not predicates.evaluate(edge.condition, context):
                    continue
            target = definition.stage(edge.to_stage)
            arrival = f"{stage.name}:{edge_index}{arrival_suffix}"
            published.extend(self._publish_stage(
                definition, target, activity_id, context, arrival))
        return published

    def _publish_stage(self, definition, stage: Stage, activity_id, context,
                       arrival) -> list:
        branches = stage.fan_out or 1
        published = []
        for i in range(branches):
            ctx = dict(context)
            if stage.fan_out:
                ctx["ensemble.index"] = i
            payload = {"activity_id": activity_id, "stage": stage.name,
                       "context": ctx, "arrival": f"{arrival}:{i}"}
            self.store.inflight_delta(activity_id, +1)
            self.broker.publish(definition.stage_queue(stage.name),
                                json.dumps(payload, sort_keys=True).encode(),
                                {"workflow": definition.workflow_id})
            published.append(payload)
        return published

    def _run_transfer(self, stage: Stage, context):
        handle_uri = substitute(str(stage.params["handle"]), context)
        machine_name = substitute(str(stage.params["machine"]), context)
        remote_path = substitute(str(stage.params["remote_path"]), context)
        machine = self.store.get_machine_by_name(machine_name)
        self.machines.transfer_between(handle_uri, machine.machine_id, remote_path)

    def _route_error(self, definition, activity_id, stage_name, reason, context):
        payload = {"activity_id": activity_id, "stage": stage_name,
                   "error": reason, "context": context}
        self.broker.publish(definition.error_queue(),
                            json.dumps(payload, sort_keys=True).encode())
        try:
            self.store.update_activity_status(activity_id, ActivityStatus.ERROR)
        except (InvalidTransition, NotFound):
            pass

    def _finish_message(self, activity_id):
        remaining = self.store.inflight_delta(activity_id, -1)
        if remaining <= 0:
            self._maybe_complete(activity_id)

    def _maybe_complete(self, activity_id):
        inflight, terminal = self.store.activity_counters(activity_id)
        if inflight > 0 or not terminal:
            return
        try:
            self.store.update_activity_status(activity_id, ActivityStatus.COMPLETED)
        except (InvalidTransition, NotFound):
            pass
