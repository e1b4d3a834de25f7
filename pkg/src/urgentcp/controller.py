"""Top-level wiring: store, broker, simulator, services, pollers, events.

A ControlPlane owns one instance of every component, connected the way a
deployment would connect separate services: the store is the single
source of truth, the broker carries workflow and sensor traffic, the
status service polls machines on a timer, and a reconciler turns queue
snapshots into job status transitions that drive workflows forward.
"""

import json
import logging
import threading
import time
from pathlib import Path

from .broker import Broker
from .config import AppConfig
from .errors import NotFound, RecoveryError
from .events import EventBus
from .machines import MachineService
from .sensors import SensorGateway
from .simulator import SimCluster
from .status import StatusService
from .store import JobStatus, StateStore
from .transport import MachineEndpoint, SimTransport
from .workflow import WorkflowDefinition, WorkflowEngine

log = logging.getLogger(__name__)

_EVENT_KINDS = {"activity": "ACTIVITY_STATUS", "job": "JOB_STATUS",
                "machine": "MACHINE_STATUS"}


class ControlPlane:
    def __init__(self, config: AppConfig, fetcher=None, cluster=None):
        """``cluster`` lets a restarted control plane reattach to machines
        that kept running while it was down (the normal situation for real
        machines; tests pass the previous instance's cluster)."""
        self.config = config
        data_dir = Path(config.data_dir)
        self.store = StateStore(data_dir / "state")
        try:
            self.broker = Broker(data_dir / "queues")
        except RecoveryError as exc:
            # Recovery truncated the damaged log tail; a reopen is clean.
            log.warning("queue log corruption, prefix recovered: %s", exc)
            self.broker = Broker(data_dir / "queues")
        self.cluster = cluster or SimCluster(config.sim_machines,
                                             realtime=config.sim_realtime)
        self.bus = EventBus(config.api.event_ring)
        self.store.on_transition(self._on_transition)
        self.transport = SimTransport(self.cluster, {})
        self._endpoints: dict[str, MachineEndpoint] = {}
        sim_nodes = {c.name: c.nodes for c in config.sim_machines}
        for ep in config.machines:
            try:
                machine = self.store.get_machine_by_name(ep.name)
            except NotFound:
                nodes = ep.total_nodes or sim_nodes.get(ep.endpoint)
                if nodes is None:
                    raise NotFound(
                        f"machine {ep.name!r}: no total_nodes and no simulator entry")
                machine = self.store.register_machine(
                    ep.name, ep.scheduler.value, nodes, ep.cores_per_node)
            self.transport.bind(machine.machine_id, ep)
            self._endpoints[machine.machine_id] = ep
        self.status = StatusService(self.store, self.transport, config.status)
        self.machine_service = MachineService(self.store, self.transport)
        self.engine = WorkflowEngine(self.store, self.broker,
                                     self.machine_service, self.status)
        self.sensors = SensorGateway(
            self.store, self.broker, trigger=self.engine.on_sensor_trigger,
            on_arrival=lambda env: self.bus.emit("SENSOR_ARRIVAL", env),
            fetcher=fetcher)
        for sensor_config in config.sensors:
            self.sensors.register_type(sensor_config)
            # Default consumer: ack envelopes and fire workflow triggers.
            self.sensors.register_consumer(sensor_config.sensor_type,
                                           lambda envelope: None)
        self.engine.resume()
        if config.workflow_dir:
            self.load_workflow_dir(config.workflow_dir)

        self._fail_streak: dict[str, int] = {}
        self._stop = threading.Event()
        self._poll_thread: threading.Thread | None = None

    # -- lifecycle ---------------------------------------------------------------

    def load_workflow_dir(self, directory):
        for path in sorted(Path(directory).glob("*.json")):
            definition = WorkflowDefinition.from_json(path.read_text())
            self.engine.register_workflow(definition)

    def start(self):
        """Run the poll loop on a background thread."""
        if self._poll_thread is not None:
            return
        self._stop.clear()
        self._poll_thread = threading.Thread(
            target=self._poll_loop, name="machine-poller", daemon=True)
        self._poll_thread.start()

    def stop(self):
        self._stop.set()
        if self._poll_thread is not None:
            self._poll_thread.join(timeout=10)
            self._poll_thread = None
        self.broker.close()
        self.store.close()

    def _poll_loop(self):
        while not self._stop.is_set():
            try:
                self.poll_once()
            except Exception:
                log.exception("poll round failed")
            self._stop.wait(self.config.status.poll_interval_s)

    # -- one poll round --------------------------------------------------------------

    def poll_once(self):
        """Poll every machine, reconcile job records, retry pending work."""
        for machine in self.store.list_machines():
            poll_start = time.monotonic()
            snapshot = self.status.poll_machine(machine.machine_id)
            self._reconcile(machine.machine_id, snapshot, poll_start)
        self.engine.retry_pending_placements()
        self.sensors.poll_pull_sources()

    def _reconcile(self, machine_id, snapshot, poll_start):
        """Turn one queue snapshot into job status transitions."""
        if not snapshot.poll_ok:
            streak = self._fail_streak.get(machine_id, 0) + 1
            self._fail_streak[machine_id] = streak
            if streak >= self.config.offline_error_polls:
                self._error_out_jobs(machine_id)
            return
        self._fail_streak[machine_id] = 0
        entries = {e.batch_id: e for e in snapshot.entries}
        for job in self.store.query_jobs(machine_id=machine_id):
            if job.status not in (JobStatus.QUEUED, JobStatus.RUNNING):
                continue
            if not job.batch_id:
                continue
            entry = entries.get(job.batch_id)
            if entry is not None:
                if entry.state.value == "RUNNING" and job.status == JobStatus.QUEUED:
                    self.store.update_job_status(job.job_id, JobStatus.RUNNING)
                continue
            submitted_mono = self.machine_service.submit_monos.get(job.job_id)
            if submitted_mono is not None and submitted_mono > poll_start:
                continue  # submitted after this poll started; not visible yet
            self.store.update_job_status(job.job_id, JobStatus.COMPLETED)
            self.engine.on_job_event(job.job_id, JobStatus.COMPLETED)

    def _error_out_jobs(self, machine_id):
        """A machine considered down: fail its live jobs so they re-place."""
        for job in self.store.query_jobs(machine_id=machine_id):
            if job.status in (JobStatus.QUEUED, JobStatus.RUNNING):
                self.store.update_job_status(job.job_id, JobStatus.ERROR)
                self.engine.on_job_event(job.job_id, JobStatus.ERROR)

    # -- helpers -----------------------------------------------------------------------

    def endpoint_for(self, machine_id) -> MachineEndpoint:
        ep = self._endpoints.get(machine_id)
        if ep is None:
            raise NotFound(f"no endpoint config for machine {machine_id!r}")
        return ep

    def _on_transition(self, entity, record, old, new):
        self.bus.emit(_EVENT_KINDS.get(entity, "ACTIVITY_STATUS"), record)

    def dump_events(self) -> list[dict]:
        """All events still in the ring, as JSON-ready dicts."""
        return [{"seq": e.seq, "kind": e.kind, "body": e.body, "at": e.at}
                for e in self.bus.replay(0)]
