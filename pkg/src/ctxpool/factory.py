"""Opportunistic pool emulation: seeded arrival/preemption traces and their replay.

Preemption is a kill with no warning.  In emulated runs the victim's
connections are dropped before its coroutines are cancelled; in live runs the
victim's process group receives SIGKILL.
"""

from __future__ import annotations

import asyncio
import enum
import json
import logging
import os
import re
import signal
import subprocess
import sys
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .core import A10, TITAN_X_PASCAL, Config, ContextRecipe, GpuModel
from .net import Clock
from .worker import Worker, WorkerExit

log = logging.getLogger(__name__)


class Scenario(str, enum.Enum):
    STATIC_20 = "STATIC_20"
    PREEMPT_1PM = "PREEMPT_1PM"
    LOW_CAPACITY = "LOW_CAPACITY"
    HIGH_CAPACITY = "HIGH_CAPACITY"

    @classmethod
    def parse(cls, name: str) -> "Scenario":
        key = name.strip().upper().replace("-", "_")
        aliases = {"STATIC20": "STATIC_20", "PREEMPT1PM": "PREEMPT_1PM", "LOW": "LOW_CAPACITY",
                   "HIGH": "HIGH_CAPACITY"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown scenario {name!r}") from None


HIGH_CAPACITY_PEAK = 186
PREEMPT_START = 900.0
PREEMPT_PERIOD = 60.0

_SPECIFIC = re.compile(r"^SPECIFIC\((?P<wid>[^)]+)\)$")


@dataclass(frozen=True)
class TraceEvent:
    at: float
    kind: str  # ARRIVE | PREEMPT
    gpu_model: Optional[str] = None
    victim_policy: Optional[str] = None
    preload: bool = False

    def __post_init__(self):
        if self.kind not in ("ARRIVE", "PREEMPT"):
            raise ValueError(f"unknown trace event kind {self.kind!r}")
        if self.at < 0:
            raise ValueError("event time must be >= 0")
        if self.kind == "ARRIVE" and not self.gpu_model:
            raise ValueError("ARRIVE needs a gpu_model")
        if self.kind == "PREEMPT":
            policy = self.victim_policy or ""
            if policy not in ("OLDEST_A10_FIRST", "RANDOM") and not _SPECIFIC.match(policy):
                raise ValueError(f"unknown victim policy {policy!r}")

    def to_json(self) -> str:
        d = {"at": self.at, "kind": self.kind}
        if self.kind == "ARRIVE":
            d["gpu_model"] = self.gpu_model
            if self.preload:
                d["preload"] = True
        else:
            d["victim_policy"] = self.victim_policy
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TraceEvent":
        return cls(float(d["at"]), d["kind"], d.get("gpu_model"), d.get("victim_policy"), bool(d.get("preload", False)))


def _static_pool(at: float = 0.0, n: int = 20) -> list[TraceEvent]:
    models = [A10, TITAN_X_PASCAL]
    return [TraceEvent(at, "ARRIVE", models[i % 2]) for i in range(n)]


def generate_trace(scenario, seed: int = 0, catalog: Optional[Mapping[str, GpuModel]] = None) -> list[TraceEvent]:
    scenario = Scenario.parse(scenario) if isinstance(scenario, str) else Scenario(scenario)
    catalog = catalog or Config().catalog
    rng = np.random.default_rng(seed)
    if scenario is Scenario.STATIC_20:
        events = _static_pool()
    elif scenario is Scenario.PREEMPT_1PM:
        events = _static_pool() + [
            TraceEvent(PREEMPT_START + i * PREEMPT_PERIOD, "PREEMPT", victim_policy="OLDEST_A10_FIRST")
            for i in range(20)
        ]
    elif scenario is Scenario.LOW_CAPACITY:
        events = _static_pool(0.0, 4)
        t = 0.0
        models = [A10, TITAN_X_PASCAL]
        for i in range(16):
            t += float(rng.uniform(100.0, 280.0))
            events.append(TraceEvent(round(t, 3), "ARRIVE", models[i % 2]))
    else:
        remaining = Counter({name: g.count for name, g in catalog.items()})
        if sum(remaining.values()) < HIGH_CAPACITY_PEAK:
            raise ValueError("catalog too small for the high-capacity trace")
        names = sorted(remaining)
        events, t, total = [], 0.0, 0
        while total < HIGH_CAPACITY_PEAK:
            size = min(int(rng.integers(5, 31)), HIGH_CAPACITY_PEAK - total)
            for _ in range(size):
                weights = np.array([remaining[n] for n in names], dtype=float)
                name = names[int(rng.choice(len(names), p=weights / weights.sum()))]
                remaining[name] -= 1
                events.append(TraceEvent(round(t, 3), "ARRIVE", name))
            total += size
            t += float(rng.geometric(1 / 30.0))
    events.sort(key=lambda e: (e.at, e.kind != "ARRIVE"))
    validate_trace(events, catalog)
    return events


def validate_trace(events: list[TraceEvent], catalog: Mapping[str, GpuModel]) -> None:
    if any(b.at < a.at for a, b in zip(events, events[1:])):
        raise ValueError("trace events must be sorted by time")
    counts = Counter(e.gpu_model for e in events if e.kind == "ARRIVE")
    for name, n in counts.items():
        if name not in catalog:
            raise ValueError(f"unknown GPU model {name!r} in trace")
        if catalog[name].count and n > catalog[name].count:
            raise ValueError(f"{n} arrivals of {name} exceed the {catalog[name].count} in the cluster")


def dump_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(e.to_json() + "\n" for e in events)


def load_trace(text: str) -> list[TraceEvent]:
    return [TraceEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


# -- pools -------------------------------------------------------------------


@dataclass
class PoolMember:
    worker_id: str
    gpu_model: str
    arrived_at: float
    handle: object = None
    alive: bool = True


class VirtualPool:
    """Workers as coroutines on the current (usually virtual-clock) loop."""

    def __init__(self, network, config: Config, clock: Clock, scheduler_address: str, fs_address: str,
                 recipe: Optional[ContextRecipe] = None):
        self.network = network
        self.config = config
        self.clock = clock
        self.scheduler_address = scheduler_address
        self.fs_address = fs_address
        self.recipe = recipe
        self.workers: dict[str, Worker] = {}
        self.tasks: dict[str, asyncio.Task] = {}

    async def spawn(self, worker_id: str, gpu_model: str, preload: bool = False) -> None:
        worker = Worker(
            worker_id, self.config.gpu(gpu_model), self.config, self.network, self.scheduler_address,
            fs_address=self.fs_address, peer_address=f"{worker_id}:peer", clock=self.clock,
        )
        if preload and self.recipe is not None:
            worker.preload(self.recipe, self.clock.now())
        self.workers[worker_id] = worker
        self.tasks[worker_id] = asyncio.ensure_future(self._run(worker))

    @staticmethod
    async def _run(worker: Worker) -> None:
        try:
            await worker.run()
        except WorkerExit as exc:
            log.debug("%s exited: %s", worker.worker_id, exc)

    def kill(self, worker_id: str) -> None:
        self.workers[worker_id].abort()
        self.tasks[worker_id].cancel()

    async def close(self) -> None:
        for wid in list(self.tasks):
            self.kill(wid)
        await asyncio.gather(*self.tasks.values(), return_exceptions=True)


class ProcessPool:
    """Workers as child processes, each in its own process group."""

    def __init__(self, scheduler_address: str, fs_address: str, config_path: Optional[str] = None,
                 time_scale: Optional[float] = None, workdir: Optional[str] = None):
        self.scheduler_address = scheduler_address
        self.fs_address = fs_address
        self.config_path = config_path
        self.time_scale = time_scale
        self.workdir = workdir
        self.procs: dict[str, subprocess.Popen] = {}

    async def spawn(self, worker_id: str, gpu_model: str, preload: bool = False) -> None:
        cmd = [sys.executable, "-m", "ctxpool", "worker", "--scheduler", self.scheduler_address,
               "--fs", self.fs_address, "--gpu", gpu_model, "--worker-id", worker_id, "--peer-port", "0"]
        if self.config_path:
            cmd[3:3] = ["--config", self.config_path]
        if self.time_scale is not None:
            cmd += ["--time-scale", str(self.time_scale)]
        if self.workdir:
            cmd += ["--cache-dir", os.path.join(self.workdir, worker_id)]
        if preload:
            cmd += ["--preload"]
        self.procs[worker_id] = subprocess.Popen(cmd, start_new_session=True)

    def kill(self, worker_id: str) -> None:
        proc = self.procs[worker_id]
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()

    async def close(self) -> None:
        for wid, proc in self.procs.items():
            if proc.poll() is None:
                self.kill(wid)


class Factory:
    """Replays a trace against a pool."""

    def __init__(self, pool, clock: Clock, trace: list[TraceEvent], seed: int = 0,
                 event_log: Optional[Callable[[dict], None]] = None):
        self.pool = pool
        self.clock = clock
        self.trace = list(trace)
        self.rng = np.random.default_rng(seed)
        self.event_log = event_log
        self.members: dict[str, PoolMember] = {}
        self.log: list[tuple[float, str, str, str]] = []
        self._next = 0
        self._spawned = 0

    def pending(self) -> bool:
        return any(e.kind == "ARRIVE" for e in self.trace[self._next :])

    def alive(self) -> list[PoolMember]:
        return [m for m in self.members.values() if m.alive]

    def population(self) -> int:
        return len(self.alive())

    def _emit(self, kind: str, worker_id: str, gpu: str) -> None:
        now = self.clock.now()
        self.log.append((now, kind, worker_id, gpu))
        if self.event_log is not None:
            self.event_log({"t": round(now, 6), "event": f"FACTORY_{kind}", "worker_id": worker_id, "gpu": gpu})

    def choose_victim(self, policy: str) -> Optional[PoolMember]:
        alive = sorted(self.alive(), key=lambda m: (m.arrived_at, m.worker_id))
        if not alive:
            return None
        m = _SPECIFIC.match(policy)
        if m:
            return next((w for w in alive if w.worker_id == m["wid"]), None)
        if policy == "RANDOM":
            return alive[int(self.rng.integers(len(alive)))]
        a10s = [w for w in alive if w.gpu_model == A10]
        return (a10s or alive)[0]

    async def apply(self, event: TraceEvent) -> None:
        if event.kind == "ARRIVE":
            worker_id = f"w{self._spawned:03d}"
            self._spawned += 1
            try:
                await self.pool.spawn(worker_id, event.gpu_model, event.preload)
            except Exception as exc:  # spawn failure is logged, the trace goes on
                log.error("spawn of %s failed: %s", worker_id, exc)
                self._emit("SPAWN_FAILED", worker_id, event.gpu_model)
                return
            self.members[worker_id] = PoolMember(worker_id, event.gpu_model, self.clock.now())
            self._emit("ARRIVE", worker_id, event.gpu_model)
        else:
            victim = self.choose_victim(event.victim_policy)
            if victim is None:
                return
            victim.alive = False
            self.pool.kill(victim.worker_id)
            self._emit("PREEMPT", victim.worker_id, victim.gpu_model)

    async def run(self) -> None:
        while self._next < len(self.trace):
            event = self.trace[self._next]
            delay = event.at - self.clock.now()
            if delay > 0:
                await self.clock.sleep(delay)
            self._next += 1
            await self.apply(event)
