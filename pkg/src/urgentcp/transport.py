"""Pluggable command/file transport between the control plane and machines.

The shipped implementation talks to the in-process machine simulator the
same way an SSH transport would talk to a production login node: one
configured credential identity per machine, command execution, and file
put/get.  An SSH/SFTP transport is a documented extension point behind
the same interface.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

from .batch import Scheduler
from .errors import MachineUnreachable, NotFound
from .simulator import CommandResult, SimCluster

DEFAULT_TIMEOUT_S = 30


@dataclass
class MachineEndpoint:
    """Connection entry for one machine, as loaded from config."""

    name: str
    scheduler: Scheduler
    transport: str = "sim"
    endpoint: str = ""  # simulator machine name (or host for an ssh transport)
    account: str = "svc"
    viz_port: int = 11111
    total_nodes: int | None = None  # None: taken from the simulator config
    cores_per_node: int = 1


class Transport(ABC):
    """Command and file transfer against one or more machines."""

    @abstractmethod
    def run_command(self, machine_id, command, timeout_s=DEFAULT_TIMEOUT_S) -> CommandResult:
        """Run a shell command; raises MachineUnreachable if the machine is offline."""

    @abstractmethod
    def put_file(self, machine_id, remote_path, data: bytes):
        ...

    @abstractmethod
    def get_file(self, machine_id, remote_path) -> bytes:
        ...


@dataclass
class AuditEntry:
    machine_id: str
    user: str
    op: str  # run | put | get
    detail: str


class SimTransport(Transport):
    """Loopback transport onto a SimCluster.

    Every call is recorded in ``audit_log`` with the credential identity it
    used, so the single-account discipline can be verified.
    """

    def __init__(self, cluster: SimCluster, bindings: dict[str, MachineEndpoint]):
        self.cluster = cluster
        self.bindings = dict(bindings)
        self.audit_log: list[AuditEntry] = []

    def bind(self, machine_id, endpoint: MachineEndpoint):
        self.bindings[machine_id] = endpoint

    def _resolve(self, machine_id) -> MachineEndpoint:
        ep = self.bindings.get(machine_id)
        if ep is None:
            raise NotFound(f"no transport binding for machine {machine_id!r}")
        return ep

    def run_command(self, machine_id, command, timeout_s=DEFAULT_TIMEOUT_S) -> CommandResult:
        ep = self._resolve(machine_id)
        self.audit_log.append(AuditEntry(machine_id, ep.account, "run", command))
        result = self.cluster.run_command(ep.endpoint, command, user=ep.account)
        if result.exit_code == 255:
            raise MachineUnreachable(f"machine {ep.name} unreachable")
        return result

    def put_file(self, machine_id, remote_path, data: bytes):
        ep = self._resolve(machine_id)
        self.audit_log.append(AuditEntry(machine_id, ep.account, "put", remote_path))
        self.cluster.stage_file(ep.endpoint, remote_path, data)

    def get_file(self, machine_id, remote_path) -> bytes:
        ep = self._resolve(machine_id)
        self.audit_log.append(AuditEntry(machine_id, ep.account, "get", remote_path))
        return self.cluster.read_file(ep.endpoint, remote_path)
