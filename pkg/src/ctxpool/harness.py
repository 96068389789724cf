"""Workload construction, experiment driver and metrics.

``run_experiment`` wires a scheduler, the filesystem emulator and a factory
replaying a trace, submits a fact-verification-shaped workload and waits for
it to drain.  In ``"emulated"`` mode everything runs in-process on a virtual
clock and is deterministic; ``"live"`` mode uses TCP and worker processes.
"""

from __future__ import annotations

import asyncio
import csv
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    Awareness,
    Config,
    ContextRecipe,
    InferenceItem,
    TaskSpec,
    default_recipe,
)
from .factory import Factory, ProcessPool, Scenario, TraceEvent, VirtualPool, generate_trace
from .fsemu import FairShareFS, FsServer
from .net import Clock, MemoryNetwork, TcpNetwork, run_virtual
from .scheduler import ExperimentReport, PoolDepleted, Scheduler

log = logging.getLogger(__name__)

CSV_HEADER = ["t_emulated", "completed_items", "connected_workers", "warm_workers"]
FULL_SCALE_ITEMS = 150_000
DESK_SCALE_ITEMS = 15_000


@dataclass
class ExperimentSpec:
    total_items: int = DESK_SCALE_ITEMS
    batch_size: int = 100
    awareness: Awareness = Awareness.FULL
    scenario: Scenario = Scenario.STATIC_20
    seed: int = 0
    cost_overrides: Mapping[str, float] = field(default_factory=dict)
    config: Optional[Config] = None
    trace: Optional[list[TraceEvent]] = None
    allow_depletion: bool = False
    event_log: Optional[object] = None  # callable taking one dict per event

    def __post_init__(self):
        self.awareness = Awareness(self.awareness)
        if isinstance(self.scenario, str):
            self.scenario = Scenario.parse(self.scenario)
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.total_items < 0:
            raise ValueError("total_items must be >= 0")

    def resolved_config(self) -> Config:
        cfg = self.config or Config()
        if self.cost_overrides:
            cfg = replace(cfg, cost=replace(cfg.cost, **self.cost_overrides))
        return cfg


def build_tasks(spec: ExperimentSpec, recipe: Optional[ContextRecipe] = None) -> list[TaskSpec]:
    if spec.batch_size < 1:
        raise ValueError("batch size must be >= 1")
    recipe = recipe or default_recipe()
    cfg = spec.resolved_config()
    tasks = []
    for n, start in enumerate(range(0, spec.total_items, spec.batch_size)):
        size = min(spec.batch_size, spec.total_items - start)
        items = [InferenceItem(f"claim-{i}") for i in range(start, start + size)]
        tasks.append(
            TaskSpec(
                items=items,
                awareness=spec.awareness,
                context_id=recipe.context_id if spec.awareness is Awareness.FULL else None,
                recipe=recipe,
                resources=cfg.task_resources,
                task_id=f"task-{n:06d}",
            )
        )
    return tasks


@dataclass
class MetricsSeries:
    t: np.ndarray
    completed: np.ndarray
    connected: np.ndarray
    warm: np.ndarray
    end_to_end: float
    total_items: int
    drained: bool = True
    label: str = ""
    report: Optional[ExperimentReport] = None
    population: list = field(default_factory=list)  # factory (t, kind, worker_id, gpu)
    fs_fetches: Mapping[str, int] = field(default_factory=dict)

    @property
    def final_completed(self) -> int:
        return int(self.completed[-1]) if len(self.completed) else 0

    @classmethod
    def from_report(cls, report: ExperimentReport, **extra) -> "MetricsSeries":
        rows = sorted(report.samples, key=lambda r: r[0])  # stable: keeps event order at equal t
        arr = np.array([r[:4] for r in rows], dtype=float).reshape(-1, 4)
        return cls(
            t=arr[:, 0], completed=arr[:, 1].astype(int), connected=arr[:, 2].astype(int),
            warm=arr[:, 3].astype(int), end_to_end=report.end_to_end, total_items=report.submitted_items,
            drained=report.drained, report=report, **extra,
        )

    def completed_at(self, times: Sequence[float]) -> np.ndarray:
        """Cumulative completed items at each time (last sample at or before it)."""
        idx = np.searchsorted(self.t, np.asarray(times, dtype=float), side="right") - 1
        out = np.where(idx >= 0, self.completed[np.clip(idx, 0, None)], 0)
        return out

    def warm_at(self, times: Sequence[float]) -> np.ndarray:
        idx = np.searchsorted(self.t, np.asarray(times, dtype=float), side="right") - 1
        return np.where(idx >= 0, self.warm[np.clip(idx, 0, None)], 0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in zip(self.t, self.completed, self.connected, self.warm):
                w.writerow([f"{row[0]:.6f}", int(row[1]), int(row[2]), int(row[3])])

    @classmethod
    def from_csv(cls, path) -> "MetricsSeries":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = [[float(x) for x in r] for r in reader if r]
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        completed = arr[:, 1].astype(int)
        final = completed[-1] if len(completed) else 0
        first_final = int(np.argmax(completed >= final)) if len(completed) else 0
        end = float(arr[first_final, 0]) if len(completed) else 0.0
        return cls(arr[:, 0], completed, arr[:, 2].astype(int), arr[:, 3].astype(int), end, int(final),
                   label=Path(path).stem)


def _arrivals_pending(factory: Factory, scheduler: Scheduler):
    def pending() -> bool:
        if factory.pending():
            return True
        return any(m.alive and m.worker_id not in scheduler.workers for m in factory.members.values())
    return pending


async def _drive(spec: ExperimentSpec, scheduler: Scheduler, factory: Factory, pool) -> ExperimentReport:
    ftask = asyncio.ensure_future(factory.run())
    try:
        try:
            return await scheduler.run_until_drained(arrivals_pending=_arrivals_pending(factory, scheduler))
        except PoolDepleted as exc:
            if spec.allow_depletion:
                return exc.report
            raise
    finally:
        scheduler.shutdown_workers()
        ftask.cancel()
        await asyncio.sleep(0)
        await pool.close()


async def run_emulated(spec: ExperimentSpec) -> MetricsSeries:
    cfg = spec.resolved_config()
    clock = Clock(1.0)
    net = MemoryNetwork()
    fs = FairShareFS(clock, cfg.cost.fs_aggregate_bandwidth, cfg.cost.fs_max_concurrent_ops)
    await net.listen("fs", FsServer(fs).handle)
    scheduler = Scheduler(cfg, clock, event_log=spec.event_log)
    await net.listen("scheduler", scheduler.handle_connection)
    recipe = default_recipe()
    scheduler.register_recipe(recipe)
    for task in build_tasks(spec, recipe):
        scheduler.submit(task)
    trace = spec.trace if spec.trace is not None else generate_trace(spec.scenario, spec.seed, cfg.catalog)
    pool = VirtualPool(net, cfg, clock, "scheduler", "fs", recipe)
    factory = Factory(pool, clock, trace, seed=spec.seed, event_log=spec.event_log)
    report = await _drive(spec, scheduler, factory, pool)
    series = MetricsSeries.from_report(report, population=list(factory.log), fs_fetches=dict(fs.labels))
    series.scheduler = scheduler
    series.fs = fs
    series.pool = pool
    return series


async def run_live(spec: ExperimentSpec, workdir: Optional[str] = None, config_path: Optional[str] = None):
    cfg = spec.resolved_config()
    clock = Clock(cfg.cost.time_scale, quantum=1e-6)
    net = TcpNetwork()
    fs = FairShareFS(clock, cfg.cost.fs_aggregate_bandwidth, cfg.cost.fs_max_concurrent_ops)
    fs_listener = await net.listen("127.0.0.1:0", FsServer(fs).handle)
    scheduler = Scheduler(cfg, clock, event_log=spec.event_log)
    sched_listener = await net.listen("127.0.0.1:0", scheduler.handle_connection)
    recipe = default_recipe()
    scheduler.register_recipe(recipe)
    for task in build_tasks(spec, recipe):
        scheduler.submit(task)
    trace = spec.trace if spec.trace is not None else generate_trace(spec.scenario, spec.seed, cfg.catalog)
    workdir = workdir or tempfile.mkdtemp(prefix="ctxpool-")
    pool = ProcessPool(sched_listener.address, fs_listener.address, config_path=config_path,
                       time_scale=cfg.cost.time_scale, workdir=workdir)
    factory = Factory(pool, clock, trace, seed=spec.seed, event_log=spec.event_log)
    try:
        report = await _drive(spec, scheduler, factory, pool)
    finally:
        sched_listener.close()
        fs_listener.close()
    series = MetricsSeries.from_report(report, population=list(factory.log), fs_fetches=dict(fs.labels))
    series.scheduler = scheduler
    return series


def run_experiment(spec: ExperimentSpec, mode: str = "emulated", **kwargs) -> MetricsSeries:
    if mode == "emulated":
        return run_virtual(run_emulated(spec))
    if mode == "live":
        return asyncio.run(run_live(spec, **kwargs))
    raise ValueError(f"unknown mode {mode!r}")


# -- analysis ------------------------------------------------------------------


def reduction_pct(before: float, after: float) -> float:
    """Percentage of ``before`` saved by ``after``."""
    if before <= 0:
        raise ValueError("baseline runtime must be positive")
    return (before - after) / before * 100.0


@dataclass
class Regression:
    slope: float
    intercept: float
    r2: float
    n: int


def linear_fit(x: Sequence[float], y: Sequence[float]) -> Regression:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or np.ptp(x) == 0:
        return Regression(float("nan"), float("nan"), float("nan"), len(x))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return Regression(float(slope), float(intercept), r2, len(x))


def throughput_windows(series: MetricsSeries, window: float = 60.0, until: Optional[float] = None,
                       use: str = "warm"):
    """Per-window (mean worker count, items/s) pairs.

    The worker count is time-averaged over the window from the sampled step
    function; throughput is completed items divided by window length.
    """
    end = until if until is not None else series.end_to_end
    if end <= 0:
        return np.zeros(0), np.zeros(0)
    edges = np.arange(0.0, end + 1e-9, window)
    if len(edges) < 2:
        return np.zeros(0), np.zeros(0)
    counts = series.warm if use == "warm" else series.connected
    fine = np.linspace(0.0, edges[-1], int(edges[-1]) * 4 + 1)
    idx = np.clip(np.searchsorted(series.t, fine, side="right") - 1, 0, None)
    step = np.where(np.searchsorted(series.t, fine, side="right") > 0, counts[idx], 0)
    xs, ys = [], []
    done = series.completed_at(edges)
    for a, b, ca, cb in zip(edges[:-1], edges[1:], done[:-1], done[1:]):
        mask = (fine >= a) & (fine < b)
        xs.append(step[mask].mean())
        ys.append((cb - ca) / (b - a))
    return np.array(xs), np.array(ys)


def throughput_regression(series: MetricsSeries, window: float = 60.0, use: str = "warm") -> Regression:
    """Regress windowed throughput on worker count while work was still queued."""
    until = None
    if series.report is not None and series.report.last_dispatch_at is not None:
        until = series.report.last_dispatch_at
    x, y = throughput_windows(series, window, until, use)
    return linear_fit(x, y)


@dataclass
class Summary:
    labels: list
    end_to_end: list
    reductions: dict  # (i, j) -> % saved by j relative to i
    range_seconds: float
    range_pct_of_best: float
    regressions: dict

    def format(self) -> str:
        lines = ["series                      end_to_end(s)   completed"]
        for label, e in zip(self.labels, self.end_to_end):
            lines.append(f"{label:<28}{e:>12.1f}")
        for (i, j), pct in self.reductions.items():
            lines.append(f"reduction {self.labels[i]} -> {self.labels[j]}: {pct:.1f}%")
        lines.append(f"runtime range: {self.range_seconds:.1f} s ({self.range_pct_of_best:.1f}% of best)")
        for label, reg in self.regressions.items():
            lines.append(f"throughput ~ warm workers [{label}]: slope {reg.slope:.3f} items/s/worker, R^2 {reg.r2:.3f}")
        return "\n".join(lines)


def summarize(*series, labels: Optional[Sequence[str]] = None, window: float = 60.0) -> Summary:
    """Compare runs.  Accepts :class:`MetricsSeries` or bare end-to-end runtimes."""
    if not series:
        raise ValueError("nothing to summarize")
    labels = list(labels) if labels else [getattr(s, "label", "") or f"run{i}" for i, s in enumerate(series)]
    ends = [float(s.end_to_end) if isinstance(s, MetricsSeries) else float(s) for s in series]
    reductions = {(i, j): reduction_pct(ends[i], ends[j]) for i, j in combinations(range(len(ends)), 2)}
    lo, hi = min(ends), max(ends)
    regressions = {}
    for label, s in zip(labels, series):
        if isinstance(s, MetricsSeries) and len(s.t) > 2:
            reg = throughput_regression(s, window)
            if not math.isnan(reg.r2):
                regressions[label] = reg
    return Summary(labels, ends, reductions, hi - lo, (hi - lo) / lo * 100.0 if lo > 0 else 0.0, regressions)


def plot(series: MetricsSeries, out, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.step(series.t, series.completed, where="post", label="completed inferences")
    ax.set_xlabel("time (emulated s)")
    ax.set_ylabel("completed inferences")
    ax2 = ax.twinx()
    ax2.step(series.t, series.connected, where="post", color="tab:gray", alpha=0.6, label="connected workers")
    ax2.set_ylabel("workers")
    ax.set_title(title or series.label)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
