import random

import pytest

from urgentcp import batch
from urgentcp.batch import JobState, Scheduler
from urgentcp.errors import MachineUnreachable, NotFound
from urgentcp.simulator import (RuntimeFraction, SimCluster, SimMachine,
                                SimMachineConfig)


def pbs_machine(nodes=4, fraction=1.0, seed=0, backfill=False, outages=()):
    return SimMachine(SimMachineConfig(
        name="pbs-a", scheduler=Scheduler.PBS, nodes=nodes,
        runtime_fraction=RuntimeFraction(kind="fixed", value=fraction),
        outage_windows=list(outages), seed=seed, backfill=backfill))


def slurm_machine(nodes=4, fraction=1.0, seed=0):
    return SimMachine(SimMachineConfig(
        name="slurm-b", scheduler=Scheduler.SLURM, nodes=nodes,
        runtime_fraction=RuntimeFraction(kind="fixed", value=fraction), seed=seed))


def submit(machine, nodes=1, walltime_s=100, name="j", queue="standard"):
    wall = batch.seconds_to_hms(walltime_s)
    if machine.config.scheduler == Scheduler.PBS:
        cmd = f"qsub -N {name} -q {queue} -A acct -l select={nodes},walltime={wall} run.sh"
    else:
        cmd = (f"sbatch --job-name={name} --partition={queue} --account=acct"
               f" --nodes={nodes} --time={wall} run.sh")
    result = machine.handle_command(cmd)
    assert result.exit_code == 0, result.stderr
    return batch.parse_submit_reply(machine.config.scheduler, result.stdout)


class TestCommands:
    def test_serial_pbs_ids(self):
        m = pbs_machine()
        assert submit(m) == "1.sim"
        assert submit(m) == "2.sim"

    def test_serial_slurm_ids(self):
        m = slurm_machine()
        assert submit(m) == "1"
        assert submit(m) == "2"

    def test_outage_returns_255(self):
        m = pbs_machine(outages=[(0, 100)])
        result = m.handle_command("qstat -f")
        assert (result.exit_code, result.stdout) == (255, "")
        m.advance(150)
        assert m.handle_command("qstat -f").exit_code == 0

    def test_cancel_finished_is_noop(self):
        m = pbs_machine()
        bid = submit(m, walltime_s=10)
        m.advance(20)
        assert m.handle_command(f"qdel {bid}").exit_code == 0
        assert m.handle_command("qdel 999.sim").exit_code == 0

    def test_cancel_running_frees_nodes(self):
        m = pbs_machine(nodes=4)
        first = submit(m, nodes=4, walltime_s=1000)
        submit(m, nodes=4, walltime_s=100, name="waiting")
        m.handle_command(f"qdel {first}")
        assert m.jobs["2.sim"].state == "RUNNING"

    def test_malformed_command(self):
        m = pbs_machine()
        assert m.handle_command("qsub --nonsense").exit_code == 1
        assert m.handle_command("sbatch --job-name=x ...").exit_code == 127

    def test_oversized_job_rejected(self):
        m = pbs_machine(nodes=2)
        result = m.handle_command(
            "qsub -N big -q q -A a -l select=8,walltime=01:00:00 run.sh")
        assert result.exit_code == 1
        assert "exceeds" in result.stderr

    def test_invalid_account_rejected(self):
        m = SimMachine(SimMachineConfig(
            name="p", scheduler=Scheduler.PBS, nodes=4), valid_accounts=["z19"])
        ok = m.handle_command("qsub -N a -q q -A z19 -l select=1,walltime=00:10:00 s")
        bad = m.handle_command("qsub -N a -q q -A nope -l select=1,walltime=00:10:00 s")
        assert ok.exit_code == 0
        assert bad.exit_code == 1 and "invalid account" in bad.stderr


class TestScheduling:
    def test_single_job_timeline(self):
        m = pbs_machine()
        submit(m, nodes=4, walltime_s=100)
        m.advance(50)
        entry = batch.parse_queue_status(Scheduler.PBS, m.render_status()).entries[0]
        assert entry.state == JobState.RUNNING and entry.elapsed_s == 50
        events = m.advance(60)
        assert [(e.at, e.kind) for e in events] == [(100, "COMPLETE")]

    def test_two_jobs_serialize_on_full_machine(self):
        m = pbs_machine(nodes=4)
        submit(m, nodes=4, walltime_s=100)
        submit(m, nodes=4, walltime_s=100)
        m.advance(250)
        starts = {e.batch_id: e.at for e in m.event_log if e.kind == "START"}
        completes = {e.batch_id: e.at for e in m.event_log if e.kind == "COMPLETE"}
        assert starts == {"1.sim": 0, "2.sim": 100}
        assert completes == {"1.sim": 100, "2.sim": 200}

    def test_advance_zero_no_events(self):
        m = pbs_machine()
        submit(m, walltime_s=100)
        m.advance(0)
        assert m.advance(0) == []

    def test_walltime_kill_at_limit(self):
        m = pbs_machine(fraction=1.5)  # actual runtime exceeds request
        submit(m, nodes=1, walltime_s=100)
        events = m.advance(200)
        kills = [e for e in events if e.kind == "KILLED"]
        assert kills and kills[0].at == 100

    def test_no_backfill_head_blocks(self):
        m = pbs_machine(nodes=4)
        submit(m, nodes=4, walltime_s=100, name="wide")   # runs
        submit(m, nodes=4, walltime_s=100, name="blocker")  # waits
        submit(m, nodes=1, walltime_s=10, name="small")   # could fit, must wait
        m.advance(50)
        assert m.jobs["3.sim"].state == "QUEUED"

    def test_backfill_lets_small_jobs_through(self):
        m = pbs_machine(nodes=4, backfill=True)
        submit(m, nodes=3, walltime_s=100, name="wide")
        submit(m, nodes=4, walltime_s=100, name="blocker")
        submit(m, nodes=1, walltime_s=10, name="small")
        m.advance(0)
        assert m.jobs["3.sim"].state == "RUNNING"

    def test_capacity_never_exceeded(self):
        rng = random.Random(42)
        m = pbs_machine(nodes=8, fraction=1.0, seed=1)
        for i in range(12):
            submit(m, nodes=rng.randint(1, 8), walltime_s=rng.randint(10, 300),
                   name=f"j{i}")
            running = sum(j.nodes for j in m.jobs.values() if j.state == "RUNNING")
            assert running <= 8
            m.advance(rng.randint(0, 120))
            running = sum(j.nodes for j in m.jobs.values() if j.state == "RUNNING")
            assert running <= 8


class TestFiles:
    def test_round_trip(self):
        m = pbs_machine()
        m.stage_file("/work/a/b/run.sh", b"#!/bin/sh\n")
        assert m.read_file("/work/a/b/run.sh") == b"#!/bin/sh\n"

    def test_missing_file(self):
        with pytest.raises(NotFound):
            pbs_machine().read_file("/nope")

    def test_outage_blocks_files(self):
        m = pbs_machine(outages=[(0, 100)])
        with pytest.raises(MachineUnreachable):
            m.stage_file("/x", b"data")
        with pytest.raises(MachineUnreachable):
            m.read_file("/x")

    def test_completion_writes_deterministic_output(self):
        import hashlib
        m = pbs_machine()
        script = b"#!/bin/sh\n# member 3\n"
        m.stage_file("/work/act/job/run.sh", script)
        m.handle_command(
            "qsub -N member-3 -q q -A a -l select=1,walltime=00:01:00 /work/act/job/run.sh")
        m.advance(60)
        out = m.read_file("/work/act/job/out.dat")
        digest = hashlib.sha256(script).hexdigest()
        assert out == f"{digest} member-3\n".encode()


class TestRendering:
    def test_pbs_block_fields(self):
        m = pbs_machine()
        submit(m, nodes=1, walltime_s=7200, name="fire01")
        m.advance(1800)
        text = m.render_status()
        assert "Resource_List.walltime = 02:00:00" in text
        assert "resources_used.walltime = 00:30:00" in text

    def test_empty_machine_renders_empty(self):
        assert pbs_machine().render_status() == ""
        assert slurm_machine().render_status() == ""

    def test_slurm_pending_elapsed_is_zero(self):
        m = slurm_machine(nodes=1)
        submit(m, nodes=1, walltime_s=600, name="run")     # starts
        submit(m, nodes=1, walltime_s=600, name="waits")   # pends
        line = m.render_status().splitlines()[1]
        assert "|PENDING|0:00|" in line

    def test_parser_closure_random_states(self):
        rng = random.Random(99)
        for case in range(60):
            scheduler = rng.choice([Scheduler.PBS, Scheduler.SLURM])
            maker = pbs_machine if scheduler == Scheduler.PBS else slurm_machine
            m = maker(nodes=rng.randint(2, 16), seed=case)
            for i in range(rng.randint(0, 8)):
                submit(m, nodes=rng.randint(1, m.config.nodes),
                       walltime_s=rng.randint(30, 4000), name=f"job{i}")
                m.advance(rng.randint(0, 500))
            parsed = batch.parse_queue_status(scheduler, m.render_status())
            assert not parsed.errors
            assert all(e.state != JobState.UNKNOWN for e in parsed.entries)
            live = [j for j in m.jobs.values() if j.state in ("QUEUED", "RUNNING")]
            assert len(parsed.entries) == len(live)


class TestDeterminism:
    def _run(self, seed):
        m = SimMachine(SimMachineConfig(
            name="pbs-a", scheduler=Scheduler.PBS, nodes=6,
            runtime_fraction=RuntimeFraction(kind="uniform", lo=0.3, hi=0.9),
            seed=seed))
        trace = []
        for i in range(8):
            submit(m, nodes=(i % 3) + 1, walltime_s=200 + i * 17, name=f"j{i}")
            events = m.advance(100)
            trace.append([(e.at, e.kind, e.batch_id) for e in events])
            trace.append(m.render_status())
        return trace

    def test_identical_seed_identical_trace(self):
        assert self._run(5) == self._run(5)

    def test_different_seed_differs(self):
        assert self._run(5) != self._run(6)


class TestCluster:
    def test_lookup_and_manual_advance(self):
        cluster = SimCluster([
            SimMachineConfig(name="a", scheduler=Scheduler.PBS, nodes=4),
            SimMachineConfig(name="b", scheduler=Scheduler.SLURM, nodes=4),
        ])
        assert cluster.machine("a").config.nodes == 4
        with pytest.raises(NotFound):
            cluster.machine("zzz")
        cluster.advance_all(100)
        assert cluster.machine("a").clock == 100
        assert cluster.machine("b").clock == 100
