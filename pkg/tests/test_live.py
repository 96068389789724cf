"""Real sockets and worker processes; slower than the rest, kept small."""

import json
import socket
import subprocess
import sys
import time

import pytest

from ctxpool.core import A10, TITAN_X_PASCAL
from ctxpool.factory import TraceEvent, dump_trace
from ctxpool.harness import ExperimentSpec, run_experiment

pytestmark = pytest.mark.live


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_live_run_with_preemption(tmp_path):
    trace = [TraceEvent(0, "ARRIVE", A10), TraceEvent(0, "ARRIVE", TITAN_X_PASCAL),
             TraceEvent(0, "ARRIVE", A10), TraceEvent(400, "PREEMPT", victim_policy="SPECIFIC(w000)")]
    events = []
    # a coarser clock so process start-up is short in emulated time
    spec = ExperimentSpec(total_items=3000, batch_size=100, trace=trace, event_log=events.append,
                          cost_overrides={"time_scale": 0.01})
    series = run_experiment(spec, mode="live", workdir=str(tmp_path))
    assert series.drained and series.final_completed == 3000
    assert series.report.duplicate_credits == 0
    lost = [e for e in events if e["event"] == "WORKER_LOST"]
    assert [e["worker_id"] for e in lost] == ["w000"]
    # the killed worker's cache directory survived for a restart
    assert (tmp_path / "w000" / "blobs" / "manifest.json").exists()


def test_three_process_roles(tmp_path):
    sport, fport = free_port(), free_port()
    (tmp_path / "pool.jsonl").write_text(dump_trace([TraceEvent(0, "ARRIVE", A10), TraceEvent(0, "ARRIVE", A10)]))
    cli = [sys.executable, "-m", "ctxpool", "--workdir", str(tmp_path)]
    sched = subprocess.Popen(cli + ["scheduler", "--port", str(sport), "--items", "600", "--events", "ev.jsonl"],
                             stdout=subprocess.PIPE, text=True)
    try:
        assert sched.stdout.readline().startswith("listening")
        factory = subprocess.run(cli + ["trace", "replay", "pool.jsonl", "--scheduler", f"127.0.0.1:{sport}",
                                        "--fs-port", str(fport), "--cache-root", "caches"],
                                 capture_output=True, text=True, timeout=120)
        assert factory.returncode == 0, factory.stderr
        assert sched.wait(timeout=60) == 0
    finally:
        if sched.poll() is None:
            sched.kill()
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[-1].split(",")[1] == "600"
    kinds = {json.loads(line)["event"] for line in (tmp_path / "ev.jsonl").read_text().splitlines()}
    assert {"REGISTER", "INSTALL_CONTEXT", "CONTEXT_READY", "DISPATCH", "DONE"} <= kinds


def test_worker_exit_code_when_scheduler_is_absent():
    port = free_port()
    start = time.monotonic()
    out = subprocess.run([sys.executable, "-m", "ctxpool", "--time-scale", "0.001", "worker", "--scheduler",
                          f"127.0.0.1:{port}", "--gpu", A10, "--connect-retries", "2"],
                         capture_output=True, text=True, timeout=60)
    assert out.returncode == 6
    assert "unreachable" in out.stderr
    assert time.monotonic() - start < 30
