import asyncio
from collections import Counter

import numpy as np
import pytest

from ctxpool.core import A10, TITAN_X_PASCAL, Awareness, Config
from ctxpool.factory import (
    HIGH_CAPACITY_PEAK,
    Factory,
    Scenario,
    TraceEvent,
    dump_trace,
    generate_trace,
    load_trace,
    validate_trace,
)
from ctxpool.harness import ExperimentSpec, run_experiment
from ctxpool.net import Clock, run_virtual

CATALOG = Config().catalog


class NullPool:
    def __init__(self):
        self.spawned, self.killed = [], []

    async def spawn(self, worker_id, gpu_model, preload=False):
        self.spawned.append(worker_id)

    def kill(self, worker_id):
        self.killed.append(worker_id)


def replay(trace, seed=0):
    async def main():
        clock = Clock(1.0)
        f = Factory(NullPool(), clock, trace, seed=seed)
        await f.run()
        return f

    return run_virtual(main())


def test_static_twenty():
    trace = generate_trace(Scenario.STATIC_20)
    assert len(trace) == 20 and all(e.kind == "ARRIVE" and e.at == 0 for e in trace)
    assert Counter(e.gpu_model for e in trace) == {A10: 10, TITAN_X_PASCAL: 10}


def test_preempt_schedule_empties_the_pool():
    trace = generate_trace("preempt-1pm")
    times = [e.at for e in trace if e.kind == "PREEMPT"]
    assert times == [900.0 + 60 * i for i in range(20)]
    f = replay(trace)
    assert f.population() == 0
    # A10s go first, oldest first
    killed = [gpu for _, kind, _, gpu in f.log if kind == "PREEMPT"]
    assert killed[:10] == [A10] * 10


@pytest.mark.parametrize("scenario", list(Scenario))
def test_same_seed_same_trace(scenario):
    assert dump_trace(generate_trace(scenario, 7)) == dump_trace(generate_trace(scenario, 7))


def test_different_seeds_differ_where_random():
    assert dump_trace(generate_trace("high", 1)) != dump_trace(generate_trace("high", 2))


def test_high_capacity_shape():
    trace = generate_trace(Scenario.HIGH_CAPACITY, seed=3)
    assert len(trace) == HIGH_CAPACITY_PEAK == 186
    counts = Counter(e.gpu_model for e in trace)
    assert all(counts[name] <= CATALOG[name].count for name in counts)
    bursts = Counter(e.at for e in trace)
    sizes = [bursts[t] for t in sorted(bursts)]
    assert all(5 <= s <= 30 for s in sizes[:-1]) and 1 <= sizes[-1] <= 30
    assert replay(trace).population() == 186


def test_low_capacity_shape():
    trace = generate_trace(Scenario.LOW_CAPACITY, seed=5)
    assert sum(e.at == 0 for e in trace) == 4
    later = [e.at for e in trace if e.at > 0]
    assert len(later) == 16
    gaps = np.diff([0.0] + later)
    assert all(100 <= g <= 280 for g in gaps)


def test_trace_file_round_trip():
    trace = generate_trace("preempt-1pm")
    assert load_trace(dump_trace(trace)) == trace
    first = dump_trace(trace).splitlines()[0]
    assert first == '{"at": 0.0, "gpu_model": "NVIDIA A10", "kind": "ARRIVE"}'


def test_trace_validation():
    with pytest.raises(ValueError):
        validate_trace([TraceEvent(5, "ARRIVE", A10), TraceEvent(1, "ARRIVE", A10)], CATALOG)
    with pytest.raises(ValueError):
        validate_trace([TraceEvent(0, "ARRIVE", "Abacus")], CATALOG)
    with pytest.raises(ValueError):
        validate_trace([TraceEvent(0, "ARRIVE", "NVIDIA H100 80GB HBM3")] * 16, CATALOG)
    with pytest.raises(ValueError):
        TraceEvent(0, "PREEMPT", victim_policy="YOUNGEST")
    with pytest.raises(ValueError):
        TraceEvent(0, "EXPLODE")


def test_specific_and_random_victims():
    trace = [TraceEvent(0, "ARRIVE", TITAN_X_PASCAL) for _ in range(4)] + [
        TraceEvent(1, "PREEMPT", victim_policy="SPECIFIC(w002)"),
        TraceEvent(2, "PREEMPT", victim_policy="RANDOM"),
        TraceEvent(3, "PREEMPT", victim_policy="OLDEST_A10_FIRST"),
    ]
    f = replay(trace, seed=11)
    kills = [wid for _, kind, wid, _ in f.log if kind == "PREEMPT"]
    assert kills[0] == "w002" and len(set(kills)) == 3
    assert kills == [wid for _, kind, wid, _ in replay(trace, seed=11).log if kind == "PREEMPT"]


def _events_run(trace, items=500, batch=100, awareness=Awareness.FULL):
    events = []
    spec = ExperimentSpec(total_items=items, batch_size=batch, awareness=awareness, trace=trace,
                          event_log=events.append)
    return run_experiment(spec), events


def test_kill_while_busy_requeues_via_event_log_join():
    trace = [TraceEvent(0, "ARRIVE", A10), TraceEvent(0, "ARRIVE", A10),
             TraceEvent(150, "PREEMPT", victim_policy="SPECIFIC(w000)")]
    series, events = _events_run(trace)
    preempt = next(e for e in events if e["event"] == "FACTORY_PREEMPT")
    lost = next(e for e in events if e["event"] == "WORKER_LOST")
    assert lost["worker_id"] == preempt["worker_id"] == "w000"
    assert lost["task_id"] is not None
    requeue = next(e for e in events if e["event"] == "REQUEUE")
    assert requeue["task_id"] == lost["task_id"] and requeue["attempt"] == 1
    done = [e for e in events if e["event"] == "DONE" and e["task_id"] == lost["task_id"]]
    assert len(done) == 1 and done[0]["worker_id"] == "w001"
    assert series.final_completed == 500


def test_kill_while_idle_shrinks_pool_without_requeue():
    trace = [TraceEvent(0, "ARRIVE", A10), TraceEvent(0, "ARRIVE", TITAN_X_PASCAL),
             TraceEvent(0, "ARRIVE", TITAN_X_PASCAL), TraceEvent(5, "PREEMPT", victim_policy="SPECIFIC(w002)")]
    series, events = _events_run(trace, items=100)
    assert any(e["event"] == "WORKER_LOST" and e["worker_id"] == "w002" for e in events)
    assert not any(e["event"] == "REQUEUE" for e in events)
    assert series.final_completed == 100


def test_arrival_after_depletion_resumes_progress():
    trace = [TraceEvent(0, "ARRIVE", A10), TraceEvent(200, "PREEMPT", victim_policy="OLDEST_A10_FIRST"),
             TraceEvent(1000, "ARRIVE", TITAN_X_PASCAL)]
    series, events = _events_run(trace, items=1000)
    assert series.drained and series.final_completed == 1000
    assert series.end_to_end > 1000
    assert int(series.connected.min()) == 0
