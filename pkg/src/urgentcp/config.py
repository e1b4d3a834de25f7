"""Configuration loading for the control plane (YAML, dataclass-backed)."""

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .batch import Scheduler
from .errors import InvalidArgument
from .sensors import SensorTypeConfig
from .simulator import RuntimeFraction, SimMachineConfig
from .status import StatusConfig
from .transport import MachineEndpoint

TOKEN_ENV = "CONTROL_API_TOKEN"


@dataclass
class ApiConfig:
    host: str = "127.0.0.1"
    port: int = 8700
    token: str = "dev-token"
    event_ring: int = 10_000
    reference_nodes: int = 4          # job shape used for the machines view estimate
    reference_walltime_s: int = 3600


@dataclass
class AppConfig:
    data_dir: str = "./data"
    api: ApiConfig = field(default_factory=ApiConfig)
    status: StatusConfig = field(default_factory=StatusConfig)
    machines: list = field(default_factory=list)        # MachineEndpoint
    sim_machines: list = field(default_factory=list)    # SimMachineConfig
    sim_realtime: bool = True
    sensors: list = field(default_factory=list)         # SensorTypeConfig
    workflow_dir: str | None = None
    console_dir: str | None = None
    offline_error_polls: int = 2  # consecutive failed polls before jobs error out


def _runtime_fraction(doc) -> RuntimeFraction:
    if doc is None:
        return RuntimeFraction()
    kind = doc.get("kind", "fixed")
    if kind == "fixed":
        return RuntimeFraction(kind="fixed", value=float(doc.get("value", 1.0)))
    return RuntimeFraction(kind="uniform", lo=float(doc.get("lo", 0.5)),
                           hi=float(doc.get("hi", 1.0)))


def config_from_dict(doc: dict) -> AppConfig:
    doc = dict(doc or {})
    api_doc = doc.get("api", {})
    api = ApiConfig(
        host=api_doc.get("host", "127.0.0.1"),
        port=int(api_doc.get("port", 8700)),
        token=os.environ.get(TOKEN_ENV) or api_doc.get("token", "dev-token"),
        event_ring=int(api_doc.get("event_ring", 10_000)),
        reference_nodes=int(api_doc.get("reference_nodes", 4)),
        reference_walltime_s=int(api_doc.get("reference_walltime_s", 3600)),
    )
    status_doc = doc.get("status", {})
    defaults = StatusConfig()
    status = StatusConfig(
        poll_interval_s=status_doc.get("poll_interval_s", defaults.poll_interval_s),
        ratio_window=status_doc.get("ratio_window", defaults.ratio_window),
        ratio_min_samples=status_doc.get("ratio_min_samples", defaults.ratio_min_samples),
        reliability_threshold=status_doc.get("reliability_threshold",
                                             defaults.reliability_threshold),
        reliability_window=status_doc.get("reliability_window",
                                          defaults.reliability_window),
        stale_after_polls=status_doc.get("stale_after_polls", defaults.stale_after_polls),
    )
    machines = []
    for m in doc.get("machines", []):
        machines.append(MachineEndpoint(
            name=m["name"],
            scheduler=Scheduler(m["scheduler"].lower()),
            transport=m.get("transport", "sim"),
            endpoint=m.get("endpoint", m["name"]),
            account=m.get("account", "svc"),
            viz_port=int(m.get("viz_port", 11111)),
            total_nodes=m.get("total_nodes"),
            cores_per_node=int(m.get("cores_per_node", 1)),
        ))
    sim_doc = doc.get("simulator", {})
    sim_machines = []
    for m in sim_doc.get("machines", []):
        sim_machines.append(SimMachineConfig(
            name=m["name"],
            scheduler=Scheduler(m["scheduler"].lower()),
            nodes=int(m["nodes"]),
            clock_rate=float(m.get("clock_rate", 1.0)),
            runtime_fraction=_runtime_fraction(m.get("runtime_fraction")),
            outage_windows=[tuple(w) for w in m.get("outage_windows", [])],
            seed=int(m.get("seed", 0)),
            backfill=bool(m.get("backfill", False)),
        ))
    sensors = []
    for s in doc.get("sensors", []):
        cfg = SensorTypeConfig(
            sensor_type=s["sensor_type"],
            mode=s.get("mode", "PUSH").upper(),
            pull_url=s.get("pull_url"),
            pull_interval_s=s.get("pull_interval_s"),
        )
        cfg.validate()
        sensors.append(cfg)
    return AppConfig(
        data_dir=doc.get("data_dir", "./data"),
        api=api,
        status=status,
        machines=machines,
        sim_machines=sim_machines,
        sim_realtime=bool(sim_doc.get("realtime", True)),
        sensors=sensors,
        workflow_dir=doc.get("workflow_dir"),
        console_dir=doc.get("console_dir"),
        offline_error_polls=int(doc.get("offline_error_polls", 2)),
    )


def load_config(path) -> AppConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidArgument(f"config file {path} does not exist")
    with open(path) as f:
        doc = yaml.safe_load(f)
    return config_from_dict(doc or {})
