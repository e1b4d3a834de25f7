"""Job lifecycle and file movement against registered machines.

A thin facade over the transport: stage a script, render the submit
command for the machine's scheduler, run it, parse the reply, and keep
the state store in step.  Commands for one machine are serialized so
scheduler interactions never interleave; distinct machines proceed
concurrently.
"""

import hashlib
import posixpath
import threading
import time
from collections import defaultdict

from . import batch
from .batch import Scheduler, SubmitSpec
from .errors import (InvalidState, NotFound, PartialFetch, SubmitRejected,
                     TransferCorrupt)
from .store import JobStatus, JOB_TERMINAL, StateStore
from .transport import Transport

DEFAULT_SCRIPT = b"#!/bin/sh\nexit 0\n"


def job_workdir(activity_id, job_id) -> str:
    """Per-job staging directory convention on every machine."""
    return f"/work/{activity_id}/{job_id}"


class MachineService:
    def __init__(self, store: StateStore, transport: Transport):
        self.store = store
        self.transport = transport
        self._machine_locks = defaultdict(threading.Lock)
        # job_id -> monotonic stamp when its batch id was recorded; lets the
        # poller tell "submitted after this poll started" from "finished".
        self.submit_monos: dict[str, float] = {}

    def _lock_for(self, machine_id):
        return self._machine_locks[machine_id]

    def submit_job(self, job_id, spec: SubmitSpec, script: bytes = DEFAULT_SCRIPT) -> str:
        """Stage the script, submit, and record the scheduler-assigned id.

        On MachineUnreachable the job is left PENDING_SUBMIT so a caller can
        re-place it; a nonzero scheduler exit raises SubmitRejected.  The
        batch id is persisted before this returns, so a crash immediately
        after submit leaves a reconcilable record rather than an orphan.
        """
        job = self.store.get_job(job_id)
        if job.status != JobStatus.PENDING_SUBMIT:
            raise InvalidState(f"job {job_id} is {job.status.value}, not PENDING_SUBMIT")
        machine = self.store.get_machine(job.machine_id)
        command = batch.render_submit(Scheduler(machine.scheduler), spec)
        with self._lock_for(job.machine_id):
            self.transport.put_file(job.machine_id, spec.script_path, script)
            result = self.transport.run_command(job.machine_id, command)
            if result.exit_code != 0:
                raise SubmitRejected(result.stderr.strip())
            batch_id = batch.parse_submit_reply(Scheduler(machine.scheduler), result.stdout)
            self.store.set_job_batch_id(job_id, batch_id)
            self.submit_monos[job_id] = time.monotonic()
            self.store.update_job_status(job_id, JobStatus.QUEUED)
        return batch_id

    def cancel_job(self, job_id):
        """Cancel on the machine and mark the record CANCELLED (idempotent)."""
        job = self.store.get_job(job_id)
        if job.status == JobStatus.CANCELLED:
            return
        if job.status in JOB_TERMINAL:
            raise InvalidState(f"job {job_id} already {job.status.value}")
        if job.batch_id:
            machine = self.store.get_machine(job.machine_id)
            command = batch.render_cancel(Scheduler(machine.scheduler), job.batch_id)
            with self._lock_for(job.machine_id):
                self.transport.run_command(job.machine_id, command)
        self.store.update_job_status(job_id, JobStatus.CANCELLED)

    def fetch_results(self, job_id, remote_paths) -> list:
        """Pull remote files into the results object store.

        Returns the stored handles; raises PartialFetch (after persisting
        what did arrive) if any path was missing.  Re-running for the same
        paths replaces rather than duplicates handles.
        """
        job = self.store.get_job(job_id)
        if job.status != JobStatus.COMPLETED:
            raise InvalidState(f"job {job_id} is {job.status.value}, not COMPLETED")
        handles, missing = [], []
        with self._lock_for(job.machine_id):
            for path in remote_paths:
                try:
                    data = self.transport.get_file(job.machine_id, path)
                except NotFound:
                    missing.append(path)
                    continue
                key = f"{job.activity_id}/{job.job_id}/{posixpath.basename(path)}"
                handles.append(self.store.put_object("results", key, data))
        merged = sorted(set(job.result_handles) | {h.uri for h in handles})
        self.store.set_job_results(job_id, merged)
        if missing:
            raise PartialFetch([h.uri for h in handles], missing)
        return handles

    def transfer_between(self, src_handle, dest_machine_id, remote_path):
        """Copy an object's bytes onto a machine, verifying the digest.

        One silent retry on digest mismatch, then TransferCorrupt.
        """
        handle = self.store.get_handle(src_handle)
        data = self.store.get_object(handle)
        with self._lock_for(dest_machine_id):
            for attempt in (1, 2):
                self.transport.put_file(dest_machine_id, remote_path, data)
                echoed = self.transport.get_file(dest_machine_id, remote_path)
                if hashlib.sha256(echoed).hexdigest() == handle.sha256:
                    return
        raise TransferCorrupt(
            f"object {handle.uri} corrupted in transit to {dest_machine_id}:{remote_path}")
