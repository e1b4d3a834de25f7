"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion.  Each test enforces both the stated checks and the stated
wall-clock budget.
"""

import hashlib
import json
import random
import threading
import time

import pytest

from urgentcp import batch
from urgentcp.batch import JobState, Scheduler, SubmitSpec
from urgentcp.broker import Broker
from urgentcp.config import config_from_dict, load_config
from urgentcp.errors import RecoveryError
from urgentcp.sensors import SensorGateway, SensorTypeConfig
from urgentcp.simulator import (RuntimeFraction, SimCluster, SimMachine,
                                SimMachineConfig)
from urgentcp.status import StatusConfig, StatusService, fifo_drain_wait
from urgentcp.store import ActivityStatus, JobStatus, StateStore
from urgentcp.transport import MachineEndpoint, SimTransport
from urgentcp.workflow import WorkflowDefinition

from conftest import FIXTURES, fire_workflow, two_machine_config
from test_status import oracle_wait


class Budget:
    def __init__(self, name, limit_s):
        self.name = name
        self.limit_s = limit_s

    def __enter__(self):
        self.start = time.monotonic()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.monotonic() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        print(f"[{status}] {self.name} ({elapsed:.2f}s / limit {self.limit_s}s)")
        if exc_type is None:
            assert elapsed < self.limit_s, \
                f"{self.name} took {elapsed:.2f}s, budget {self.limit_s}s"


def test_parser_fixtures():
    with Budget("parser fixtures: corpora parse byte-exact", 1.0):
        total = 0
        for dialect, scheduler in (("pbs", Scheduler.PBS), ("slurm", Scheduler.SLURM)):
            paths = sorted((FIXTURES / dialect).glob("*.txt"))
            assert paths
            for path in paths:
                expected = json.loads(
                    path.with_suffix("").with_suffix(".expected.json").read_text())
                parsed = batch.parse_queue_status(scheduler, path.read_text())
                assert not parsed.errors, path.name
                assert parsed.elapsed_fallback_used == expected["elapsed_fallback_used"]
                got = [{"batch_id": e.batch_id, "queue": e.queue,
                        "state": e.state.value, "nodes": e.nodes,
                        "walltime_req_s": e.walltime_req_s, "owner": e.owner,
                        "elapsed_s": e.elapsed_s} for e in parsed.entries]
                assert got == expected["entries"], path.name
                total += len(got)
        assert total >= 40  # >= 20 per dialect


def _random_spec(rng):
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    word = lambda n: "".join(rng.choice(alphabet) for _ in range(rng.randint(1, n)))
    return SubmitSpec(
        nodes=rng.randint(1, 4096),
        walltime_req_s=rng.randint(1, 999 * 3600),
        account=word(10), queue=word(12),
        script_path="/".join(word(8) for _ in range(rng.randint(1, 3))),
        job_name=word(24))


def test_render_parse_closure():
    with Budget("render/parse closure: 1000 specs + 1000 simulator states", 10.0):
        rng = random.Random(2024)
        for _ in range(1000):
            spec = _random_spec(rng)
            scheduler = rng.choice([Scheduler.PBS, Scheduler.SLURM])
            command = batch.render_submit(scheduler, spec)
            assert batch.parse_submit_command(scheduler, command) == spec

        for case in range(1000):
            scheduler = rng.choice([Scheduler.PBS, Scheduler.SLURM])
            machine = SimMachine(SimMachineConfig(
                name="m", scheduler=scheduler, nodes=rng.randint(1, 32),
                runtime_fraction=RuntimeFraction("uniform", lo=0.2, hi=1.0),
                seed=case))
            for i in range(rng.randint(0, 6)):
                spec = SubmitSpec(nodes=rng.randint(1, machine.config.nodes),
                                  walltime_req_s=rng.randint(10, 90000),
                                  account="acct", queue="standard",
                                  script_path="s.sh", job_name=f"job{i}")
                machine.handle_command(batch.render_submit(scheduler, spec))
                machine.advance(rng.randint(0, 2000))
            parsed = batch.parse_queue_status(scheduler, machine.render_status())
            assert not parsed.errors
            assert all(e.state != JobState.UNKNOWN for e in parsed.entries)
            live = [j for j in machine.jobs.values()
                    if j.state in ("QUEUED", "RUNNING")]
            assert len(parsed.entries) == len(live)


def _drain_serially(broker, queue, expect_n):
    got, done = [], threading.Event()

    def handler(msg):
        if len(got) >= expect_n:
            return
        got.append(msg.payload)
        broker.ack(msg.message_id)
        if len(got) >= expect_n:
            done.set()

    consumer = broker.consume(queue, handler, prefetch=1)
    if expect_n == 0 or done.wait(30):
        broker.cancel_consumer(consumer)
        return got
    raise AssertionError(f"drained {len(got)}/{expect_n}")


def test_broker_properties(tmp_path):
    with Budget("broker: FIFO x1000, exactly-once x1000 msgs, 50 crash points", 60.0):
        rng = random.Random(11)

        # FIFO order across 1000 random publish sequences
        for _ in range(1000):
            b = Broker()
            b.declare_queue("q", False)
            payloads = [rng.randbytes(rng.randint(0, 16))
                        for _ in range(rng.randint(1, 12))]
            for p in payloads:
                b.publish("q", p)
            assert _drain_serially(b, "q", len(payloads)) == payloads
            b.close()

        # exactly-once completion with 4 competing consumers, 1000 messages
        b = Broker()
        b.declare_queue("work", False)
        ids = [b.publish("work", str(i).encode()) for i in range(1000)]
        seen = []
        lock = threading.Lock()
        done = threading.Event()

        def consume(msg):
            with lock:
                seen.append(msg.message_id)
                n = len(seen)
            b.ack(msg.message_id)
            if n >= 1000:
                done.set()

        for _ in range(4):
            b.consume("work", consume, prefetch=rng.randint(1, 8))
        assert done.wait(30)
        time.sleep(0.1)
        with lock:
            assert sorted(seen) == sorted(ids)      # every message exactly once
        b.close()

        # crash-recovery equivalence across 50 randomized crash points
        for case in range(50):
            case_dir = tmp_path / f"crash{case}"
            b = Broker(case_dir)
            b.declare_queue("q", True)
            n = rng.randint(1, 12)
            payloads = [f"c{case}-m{i}".encode() for i in range(n)]
            for p in payloads:
                b.publish("q", p)

            corrupt = case % 3 == 2
            if corrupt:
                expected = payloads[:-1]  # the final record will be damaged
                b.close()
                log = case_dir / "q.qlog"
                data = log.read_bytes()
                log.write_bytes(data[:len(data) - rng.randint(1, 4)])
                with pytest.raises(RecoveryError):
                    Broker(case_dir)
                b2 = Broker(case_dir)  # truncated tail; second open is clean
            else:
                # deliver a prefix serially, acking some and leaving the rest
                k = rng.randint(0, n)
                acked, unacked_delivered = [], []
                stop = threading.Event()

                def handler(msg):
                    if len(acked) + len(unacked_delivered) >= k:
                        stop.set()
                        return
                    if rng.random() < 0.5:
                        acked.append(msg.payload)
                        b.ack(msg.message_id)
                    else:
                        unacked_delivered.append(msg.payload)
                    if len(acked) + len(unacked_delivered) >= k:
                        stop.set()

                if k:
                    b.consume("q", handler, prefetch=max(1, k))
                    stop.wait(10)
                    time.sleep(0.05)
                b.close()  # crash: unacked stay unacked
                survivors = [p for p in payloads if p not in acked]
                # redelivered-first ordering: unacked in delivery order, then
                # the never-delivered tail in publish order
                expected = unacked_delivered + \
                    [p for p in survivors if p not in unacked_delivered]
                b2 = Broker(case_dir)
            assert _drain_serially(b2, "q", len(expected)) == expected
            b2.close()


def test_estimator_oracle_equivalence(tmp_path):
    with Budget("estimator: 500 oracle states + 100 simulator-realized waits", 30.0):
        rng = random.Random(5150)

        # exact match against the independent brute-force oracle
        for _ in range(500):
            total = rng.randint(1, 16)
            running = [(rng.randint(0, 400), rng.randint(1, total))
                       for _ in range(rng.randint(0, 5))]
            queued = [(rng.randint(0, 400), rng.randint(1, 16))
                      for _ in range(rng.randint(0, 5))]
            cand = rng.randint(1, total)
            assert fifo_drain_wait(total, running, queued, cand) == \
                oracle_wait(total, running, queued, cand)

        # predicted wait equals the simulator's realized wait, exactly
        store = StateStore(tmp_path / "state")
        for case in range(100):
            nodes = rng.randint(2, 12)
            scheduler = rng.choice([Scheduler.PBS, Scheduler.SLURM])
            cluster = SimCluster([SimMachineConfig(
                name="m", scheduler=scheduler, nodes=nodes,
                runtime_fraction=RuntimeFraction("fixed", 1.0), seed=case)])
            machine = store.register_machine(f"case{case}", scheduler.value,
                                             nodes, 1)
            transport = SimTransport(cluster, {machine.machine_id: MachineEndpoint(
                name=f"case{case}", scheduler=scheduler,
                endpoint="m", account="svc")})
            service = StatusService(store, transport, StatusConfig())
            sim = cluster.machine("m")
            for i in range(rng.randint(0, 6)):
                spec = SubmitSpec(nodes=rng.randint(1, nodes),
                                  walltime_req_s=rng.randint(20, 900),
                                  account="svc", queue="standard",
                                  script_path="s", job_name=f"bg{i}")
                sim.handle_command(batch.render_submit(scheduler, spec))
                sim.advance(rng.randint(0, 300))

            cand_nodes = rng.randint(1, nodes)
            cand_wall = rng.randint(20, 900)
            service.poll_machine(machine.machine_id)
            estimate = service.estimate_wait(machine.machine_id, cand_nodes, cand_wall)

            submit_clock = sim.clock
            spec = SubmitSpec(nodes=cand_nodes, walltime_req_s=cand_wall,
                              account="svc", queue="standard",
                              script_path="s", job_name="candidate")
            reply = sim.handle_command(batch.render_submit(scheduler, spec))
            batch_id = batch.parse_submit_reply(scheduler, reply.stdout)
            sim.advance(10 ** 7)
            start = next(e.at for e in sim.event_log
                         if e.kind == "START" and e.batch_id == batch_id)
            assert start - submit_clock == estimate.wait_s, f"case {case}"
        store.close()


def test_machine_selection(tmp_path):
    with Budget("selection: exhaustive orderings, offline/unreliable excluded", 1.0):
        import itertools
        store = StateStore(tmp_path / "sel")
        cluster = SimCluster([])
        service = StatusService(store, SimTransport(cluster, {}), StatusConfig())
        from urgentcp.status import entry_to_dict
        from urgentcp.batch import QueueEntry

        def mk(name, wait_s, available=True, reliability=1.0):
            m = store.register_machine(name, "pbs", 16, 1, available=available,
                                       reliability=reliability)
            entries = []
            if wait_s:
                entries = [QueueEntry(batch_id="1", queue="q",
                                      state=JobState.RUNNING, nodes=16,
                                      walltime_req_s=wait_s, owner="u",
                                      elapsed_s=0)]
            store.add_snapshot(m.machine_id, int(time.time()), True, False,
                               json.dumps([entry_to_dict(e) for e in entries]))
            return m

        ok_a = mk("aa", 360)
        ok_b = mk("bb", 360)
        slow = mk("cc", 1800)
        offline = mk("dd", 0, available=False)
        flaky = mk("ee", 0, reliability=0.49)

        machines = [ok_a, ok_b, slow, offline]
        for ordering in itertools.permutations(machines):
            assert service.select_machine(4, 600, list(ordering)) == ok_a.machine_id

        for ordering in itertools.permutations([ok_b, slow, offline, flaky]):
            assert service.select_machine(4, 600, list(ordering)) == ok_b.machine_id

        # offline and sub-threshold machines are never selected even when idle
        for candidate_set in ([offline, slow], [flaky, slow]):
            assert service.select_machine(4, 600, candidate_set) == slow.machine_id
        store.close()


def _expected_out_dat(script_text: str, job_name: str) -> bytes:
    digest = hashlib.sha256(script_text.encode()).hexdigest()
    return f"{digest} {job_name}\n".encode()


def test_end_to_end_urgent_scenario(tmp_path, make_control_plane):
    with Budget("end-to-end: sensor -> 3 stages, fan-out 5, 2 machines", 60.0):
        cp = make_control_plane()
        cp.engine.register_workflow(WorkflowDefinition.from_dict(fire_workflow()))
        cp.start()
        cp.sensors.ingest_push("hotspot", "sat-7", b'{"lat": 42.1, "lon": 9.0}')

        deadline = time.monotonic() + 55
        activity = None
        while time.monotonic() < deadline:
            activities = cp.store.list_activities()
            if activities and activities[0].status in (
                    ActivityStatus.COMPLETED, ActivityStatus.ERROR,
                    ActivityStatus.CANCELLED):
                activity = activities[0]
                break
            time.sleep(0.1)
        assert activity is not None, "activity never finished"
        assert activity.status == ActivityStatus.COMPLETED

        jobs = cp.store.query_jobs(activity_id=activity.activity_id)
        assert len(jobs) == 7  # preprocess + 5 ensemble + postprocess
        assert all(j.status == JobStatus.COMPLETED for j in jobs)
        used = {cp.store.get_machine(j.machine_id).name for j in jobs}
        assert used == {"pbs-a", "slurm-b"}

        # the five ensemble outputs made it into the object store with
        # independently recomputable contents and digests
        with cp.store._lock:
            rows = cp.store._db.execute(
                "SELECT ensemble_index, context, job_id FROM continuations"
                " WHERE activity_id = ? AND stage = 'ensemble'",
                (activity.activity_id,)).fetchall()
        assert len(rows) == 5
        for row in rows:
            index = row["ensemble_index"]
            job = cp.store.get_job(row["job_id"])
            assert len(job.result_handles) == 1
            data = cp.store.get_object(job.result_handles[0])
            expected = _expected_out_dat(f"#!/bin/sh\n# member {index}\n",
                                         f"ensemble-{index}")
            assert data == expected, f"ensemble member {index}"
            handle = cp.store.get_handle(job.result_handles[0])
            assert handle.sha256 == hashlib.sha256(data).hexdigest()
        cp.stop()


def test_outage_failover(tmp_path):
    with Budget("outage failover: re-placement + exact reliability drop", 60.0):
        from urgentcp.controller import ControlPlane
        config = two_machine_config(
            tmp_path / "data",
            outage_windows={"pbs-a": [[600, 10 ** 9]]})
        cp = ControlPlane(config)
        cp.engine.register_workflow(WorkflowDefinition.from_dict(
            fire_workflow(fan_out=3, walltimes=(600, 400, 200))))
        activity_id = cp.engine.start_activity(
            "wf-fire", {"sensor.envelope": "env-1"}, origin="MANUAL")

        cp.poll_once()  # places preprocess on pbs-a (idle, first by name)
        pbs = cp.store.get_machine_by_name("pbs-a")
        slurm = cp.store.get_machine_by_name("slurm-b")
        first_jobs = cp.store.query_jobs(activity_id=activity_id)
        assert first_jobs and first_jobs[0].machine_id == pbs.machine_id

        time.sleep(0.7)  # virtual clock passes 600: pbs-a enters its outage
        deadline = time.monotonic() + 50
        while time.monotonic() < deadline:
            cp.poll_once()
            if cp.store.get_activity(activity_id).status in (
                    ActivityStatus.COMPLETED, ActivityStatus.ERROR,
                    ActivityStatus.CANCELLED):
                break
            time.sleep(0.05)

        activity = cp.store.get_activity(activity_id)
        assert activity.status == ActivityStatus.COMPLETED
        jobs = cp.store.query_jobs(activity_id=activity_id)
        errored_on_pbs = [j for j in jobs if j.status == JobStatus.ERROR
                          and j.machine_id == pbs.machine_id]
        assert errored_on_pbs, "outage produced no failed jobs to re-place"
        completed = [j for j in jobs if j.status == JobStatus.COMPLETED]
        assert len(completed) == 5  # every stage still finished
        assert all(j.machine_id == slurm.machine_id for j in completed
                   if j.started_at and j.submitted_at >= errored_on_pbs[0].ended_at)

        # reliability dropped by exactly failed_polls / window
        with cp.store._lock:
            rows = cp.store._db.execute(
                "SELECT poll_ok FROM snapshots WHERE machine_id = ?"
                " ORDER BY seq DESC LIMIT 144", (pbs.machine_id,)).fetchall()
        flags = [bool(r["poll_ok"]) for r in rows]
        failed = flags.count(False)
        assert failed > 0
        expected = (len(flags) - failed) / len(flags)
        assert cp.store.get_machine(pbs.machine_id).reliability == expected
        assert not cp.store.get_machine(pbs.machine_id).available
        cp.stop()


def test_sensor_burst(tmp_path):
    with Budget("sensor burst: 1000 pushes, slow consumer, zero losses", 30.0):
        store = StateStore(tmp_path / "state")
        broker = Broker(tmp_path / "queues")
        gateway = SensorGateway(store, broker)
        gateway.register_type(SensorTypeConfig(sensor_type="hotspot", mode="PUSH"))

        handled = []
        done = threading.Event()

        def slow_consumer(envelope):
            time.sleep(0.01)
            handled.append(envelope["envelope_id"])
            if len(handled) >= 1000:
                done.set()

        gateway.register_consumer("hotspot", slow_consumer, prefetch=4)
        pushed = [gateway.ingest_push("hotspot", "sat-7", f"frame-{i}".encode())
                  for i in range(1000)]
        assert broker.queue_depth("sensor.hotspot") > 0  # backlog built up
        assert done.wait(25)
        time.sleep(0.1)
        assert sorted(handled) == sorted(pushed)  # zero losses, no duplicates
        assert broker.queue_depth("sensor.hotspot") == 0
        assert broker.unacked_count() == 0
        broker.close()
        store.close()


def test_default_configuration(tmp_path):
    with Budget("defaults: poll interval 600s, overridable from config", 1.0):
        assert StatusConfig().poll_interval_s == 600
        assert config_from_dict({}).status.poll_interval_s == 600

        config_path = tmp_path / "config.yaml"
        config_path.write_text("data_dir: ./d\n")
        assert load_config(config_path).status.poll_interval_s == 600

        config_path.write_text("status:\n  poll_interval_s: 120\n")
        assert load_config(config_path).status.poll_interval_s == 120
