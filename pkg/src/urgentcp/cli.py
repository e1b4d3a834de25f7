"""simctl: explore simulated machines from the shell.

Reads a simulator config (the ``simulator:`` section of a control-plane
config file, or a bare file with a ``machines:`` list) and runs an
interactive loop::

    simctl --config config.yaml
    sim> submit pbs-a qsub -N demo -q standard -A z19 -l select=2,walltime=00:10:00 run.pbs
    sim> advance pbs-a 300
    sim> status pbs-a

Use ``--script file`` to run commands non-interactively.
"""

import argparse
import sys

import yaml

from .batch import Scheduler
from .config import _runtime_fraction
from .simulator import SimCluster, SimMachineConfig


def _load_cluster(path) -> SimCluster:
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    sim = doc.get("simulator", doc)
    configs = []
    for m in sim.get("machines", []):
        configs.append(SimMachineConfig(
            name=m["name"], scheduler=Scheduler(m["scheduler"].lower()),
            nodes=int(m["nodes"]), clock_rate=float(m.get("clock_rate", 1.0)),
            runtime_fraction=_runtime_fraction(m.get("runtime_fraction")),
            outage_windows=[tuple(w) for w in m.get("outage_windows", [])],
            seed=int(m.get("seed", 0)), backfill=bool(m.get("backfill", False))))
    if not configs:
        sys.exit("no simulator machines in config")
    return SimCluster(configs, realtime=False)


def _execute(cluster: SimCluster, line: str) -> bool:
    parts = line.strip().split(None, 2)
    if not parts:
        return True
    verb = parts[0]
    if verb in ("quit", "exit"):
        return False
    if verb == "machines":
        for name, m in cluster.machines.items():
            print(f"{name}: {m.config.scheduler.value}, {m.config.nodes} nodes,"
                  f" clock={m.clock}s, free={m.free_nodes()}")
        return True
    if len(parts) < 2:
        print("usage: submit|status|advance|cancel <machine> [...]", file=sys.stderr)
        return True
    name = parts[1]
    try:
        machine = cluster.machine(name)
    except Exception as exc:
        print(exc, file=sys.stderr)
        return True
    if verb == "status":
        out = machine.handle_command(
            "qstat -f" if machine.config.scheduler == Scheduler.PBS else "squeue")
        print(out.stdout, end="")
        if out.exit_code:
            print(f"(exit {out.exit_code})", file=sys.stderr)
    elif verb == "advance":
        events = machine.advance(int(parts[2]))
        for e in events:
            print(f"t={e.at} {e.kind} {e.batch_id}")
        print(f"clock={machine.clock}")
    elif verb == "submit":
        result = machine.handle_command(parts[2])
        print(result.stdout, end="")
        if result.exit_code:
            print(result.stderr, file=sys.stderr)
    elif verb == "cancel":
        tool = "qdel" if machine.config.scheduler == Scheduler.PBS else "scancel"
        result = machine.handle_command(f"{tool} {parts[2]}")
        if result.exit_code:
            print(result.stderr, file=sys.stderr)
    else:
        print(f"unknown command {verb!r}", file=sys.stderr)
    return True


def main(argv=None):
    parser = argparse.ArgumentParser(prog="simctl", description=__doc__)
    parser.add_argument("--config", required=True, help="config file with simulator machines")
    parser.add_argument("--script", help="file of commands to run instead of a prompt")
    args = parser.parse_args(argv)
    cluster = _load_cluster(args.config)
    if args.script:
        with open(args.script) as f:
            for line in f:
                if not _execute(cluster, line):
                    break
        return 0
    try:
        while True:
            line = input("sim> ")
            if not _execute(cluster, line):
                break
    except EOFError:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
