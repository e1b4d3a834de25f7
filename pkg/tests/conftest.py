import time
from pathlib import Path

import pytest

from urgentcp.config import config_from_dict
from urgentcp.controller import ControlPlane

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def wait_until(predicate, timeout=30.0, interval=0.05, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


def two_machine_config(data_dir, clock_rate=1000, nodes=4, fraction=1.0,
                       poll_interval_s=0.2, outage_windows=None, seeds=(7, 8),
                       **overrides):
    doc = {
        "data_dir": str(data_dir),
        "api": {"token": "test-token"},
        "status": {"poll_interval_s": poll_interval_s},
        "machines": [
            {"name": "pbs-a", "scheduler": "pbs", "endpoint": "pbs-a", "account": "z19"},
            {"name": "slurm-b", "scheduler": "slurm", "endpoint": "slurm-b", "account": "z19"},
        ],
        "simulator": {"realtime": True, "machines": [
            {"name": "pbs-a", "scheduler": "pbs", "nodes": nodes,
             "clock_rate": clock_rate, "seed": seeds[0],
             "runtime_fraction": {"kind": "fixed", "value": fraction},
             "outage_windows": (outage_windows or {}).get("pbs-a", [])},
            {"name": "slurm-b", "scheduler": "slurm", "nodes": nodes,
             "clock_rate": clock_rate, "seed": seeds[1],
             "runtime_fraction": {"kind": "fixed", "value": fraction},
             "outage_windows": (outage_windows or {}).get("slurm-b", [])},
        ]},
        "sensors": [{"sensor_type": "hotspot", "mode": "PUSH"}],
    }
    doc.update(overrides)
    return config_from_dict(doc)


def fire_workflow(fan_out=5, walltimes=(600, 1200, 300)):
    return {
        "workflow_id": "wf-fire",
        "kind": "wildfire",
        "entry_stage": "preprocess",
        "triggers": [{"kind": "SENSOR", "sensor_type": "hotspot"}, {"kind": "MANUAL"}],
        "stages": [
            {"name": "preprocess", "kind": "SUBMIT_JOB",
             "params": {"nodes": 2, "walltime_req_s": walltimes[0], "account": "z19",
                        "queue": "standard",
                        "script": "#!/bin/sh\n# preprocess ${sensor.envelope}\n"}},
            {"name": "ensemble", "kind": "SUBMIT_JOB",
             "params": {"fan_out": fan_out, "nodes": 2, "walltime_req_s": walltimes[1],
                        "account": "z19", "queue": "standard",
                        "script": "#!/bin/sh\n# member ${ensemble.index}\n"}},
            {"name": "postprocess", "kind": "SUBMIT_JOB",
             "params": {"nodes": 1, "walltime_req_s": walltimes[2], "account": "z19",
                        "queue": "standard", "script": "#!/bin/sh\n# postprocess\n"}},
            {"name": "done", "kind": "TERMINAL"},
        ],
        "edges": [
            {"from": "preprocess", "to": "ensemble"},
            {"from": "ensemble", "to": "postprocess"},
            {"from": "postprocess", "to": "done"},
        ],
    }


@pytest.fixture
def make_control_plane(tmp_path):
    """Factory building ControlPlanes over one shared tmp dir; stops them all."""
    built = []

    def build(config=None, cluster=None, **config_kwargs):
        cfg = config or two_machine_config(tmp_path / "data", **config_kwargs)
        cp = ControlPlane(cfg, cluster=cluster)
        built.append(cp)
        return cp

    yield build
    for cp in built:
        try:
            cp.stop()
        except Exception:
            pass
