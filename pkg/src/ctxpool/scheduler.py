"""The manager: task ledger, worker registry, context-aware placement.

All state lives in one :class:`Scheduler` and is only mutated from handlers
running on the event loop, one at a time.  Handlers never await a send.
"""

from __future__ import annotations

import asyncio
import collections
import enum
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import protocol
from .core import Awareness, Config, ContextRecipe, GpuModel, ResourceRequest, TaskSpec
from .net import Clock, Connection

log = logging.getLogger(__name__)


class WorkerState(str, enum.Enum):
    CONNECTED = "CONNECTED"
    INSTALLING = "INSTALLING"
    BUSY = "BUSY"
    IDLE = "IDLE"
    LOST = "LOST"


class TaskState(str, enum.Enum):
    READY = "READY"
    DISPATCHED = "DISPATCHED"
    DONE = "DONE"


class DuplicateTaskError(ValueError):
    pass


class PoolDepleted(RuntimeError):
    """No workers are connected and none are expected to arrive."""

    def __init__(self, message: str, report: "ExperimentReport"):
        super().__init__(message)
        self.report = report


@dataclass
class WorkerDescriptor:
    worker_id: str
    address: Optional[str]
    gpu: GpuModel
    resources: ResourceRequest
    conn: Optional[Connection] = None
    hosted_contexts: set = field(default_factory=set)
    cached_blobs: set = field(default_factory=set)
    state: WorkerState = WorkerState.CONNECTED
    current_task: Optional[str] = None
    installing: Optional[str] = None
    install_from: Optional[str] = None
    install_started: float = 0.0
    active_serves: int = 0
    cannot_host: set = field(default_factory=set)
    seq: int = 0
    connected_at: float = 0.0
    last_seen: float = 0.0

    @property
    def alive(self) -> bool:
        return self.state is not WorkerState.LOST


@dataclass
class LedgerEntry:
    task: TaskSpec
    seq: int
    state: TaskState = TaskState.READY
    attempt: int = 0
    accepted_attempt: Optional[int] = None
    worker_id: Optional[str] = None
    submitted_at: float = 0.0
    dispatched_at: Optional[float] = None
    completed_at: Optional[float] = None
    timings: Optional[dict] = None


@dataclass
class InstallRecord:
    worker_id: str
    context_id: str
    directed_source: str
    actual_source: str
    build_seconds: float
    ready_at: float
    wait_seconds: float = 0.0


@dataclass
class ExperimentReport:
    end_to_end: float
    submitted_items: int
    completed_items: int
    item_completion_times: np.ndarray
    samples: list  # (t, completed, connected, warm, ready_tasks)
    task_timings: dict
    worker_log: list  # (t, worker_id, "ARRIVE" | "LOST", gpu)
    installs: list
    duplicate_credits: int = 0
    stale_results: int = 0
    drained: bool = True
    diagnostic: str = ""
    last_dispatch_at: Optional[float] = None


MIN_HEARTBEAT_WALL = 2.0  # wall seconds


class Scheduler:
    def __init__(
        self,
        config: Config,
        clock: Clock,
        event_log: Optional[Callable[[dict], None]] = None,
        sample_interval: float = 10.0,
    ):
        self.config = config
        self.clock = clock
        # Under a compressed clock a few milliseconds of CPU starvation would
        # otherwise look like a dead worker.
        self.heartbeat_timeout = max(config.heartbeat_timeout, MIN_HEARTBEAT_WALL / clock.time_scale)
        self.event_log = event_log
        self.sample_interval = sample_interval
        self.workers: dict[str, WorkerDescriptor] = {}
        self.ledger: dict[str, LedgerEntry] = {}
        self.recipes: dict[str, ContextRecipe] = {}
        # ready queues: one per FULL context, one (key None) for everything else
        self._ready: dict[Optional[str], collections.deque] = collections.defaultdict(collections.deque)
        self._ready_count = 0
        self._seq = itertools.count()
        self._worker_seq = itertools.count()
        self._outstanding = 0
        self.submitted_items = 0
        self.completed_items = 0
        self.duplicate_credits = 0
        self._credited: set[str] = set()
        self.stale_results = 0
        self.anomalies: list[str] = []
        self._completion_chunks: list[tuple[float, int]] = []
        self.samples: list[tuple] = []
        self.worker_log: list[tuple] = []
        self.installs: list[InstallRecord] = []
        self._pending_installs: dict[str, float] = {}
        self.directives: list[tuple[str, str, str]] = []
        self.placements: list[tuple[str, str]] = []
        self.last_dispatch_at: Optional[float] = None
        self._drained = asyncio.Event()
        self._changed = asyncio.Event()
        self._scheduling = False
        self._again = False
        self._shutting_down = False

    # -- bookkeeping helpers ----------------------------------------------

    def _log(self, event: str, **ids) -> None:
        if self.event_log is not None:
            self.event_log({"t": round(self.clock.now(), 6), "event": event, **ids})

    def connected(self) -> int:
        return sum(1 for w in self.workers.values() if w.alive and w.state is not WorkerState.CONNECTED)

    def warm(self) -> int:
        return sum(1 for w in self.workers.values() if w.alive and w.hosted_contexts)

    def _sample(self) -> None:
        self.samples.append((self.clock.now(), self.completed_items, self.connected(), self.warm(), self._ready_count))

    def _signal(self) -> None:
        self._changed.set()

    # -- submission ---------------------------------------------------------

    def register_recipe(self, recipe: ContextRecipe) -> str:
        self.recipes[recipe.context_id] = recipe
        return recipe.context_id

    def submit(self, task: TaskSpec) -> str:
        if task.task_id in self.ledger:
            raise DuplicateTaskError(f"task {task.task_id} already submitted")
        if task.awareness is Awareness.FULL and task.context_id not in self.recipes:
            if task.recipe is None:
                raise ValueError(f"no recipe registered for context {task.context_id}")
            self.register_recipe(task.recipe)
        if task.awareness is not Awareness.FULL and task.recipe is None:
            raise ValueError("AGNOSTIC/PARTIAL tasks must carry the recipe they load")
        entry = LedgerEntry(task, next(self._seq), attempt=task.attempt, submitted_at=self.clock.now())
        self.ledger[task.task_id] = entry
        self._enqueue(entry)
        self._outstanding += 1
        self.submitted_items += task.batch_size
        self._drained.clear()
        self._log("SUBMIT", task_id=task.task_id)
        return task.task_id

    def _queue_key(self, task: TaskSpec) -> Optional[str]:
        return task.context_id if task.awareness is Awareness.FULL else None

    def _enqueue(self, entry: LedgerEntry, front: bool = False) -> None:
        q = self._ready[self._queue_key(entry.task)]
        if front:
            q.appendleft(entry.task.task_id)
        else:
            q.append(entry.task.task_id)
        self._ready_count += 1

    def _requeue(self, entry: LedgerEntry, reason: str) -> None:
        entry.state = TaskState.READY
        entry.attempt += 1
        entry.worker_id = None
        self._enqueue(entry, front=True)
        self._log("REQUEUE", task_id=entry.task.task_id, attempt=entry.attempt, reason=reason)

    # -- worker sessions ----------------------------------------------------

    async def handle_connection(self, conn: Connection) -> None:
        first = await conn.recv()
        if first is None:
            return
        if first["type"] != "REGISTER":
            log.warning("first message from %s was %s, dropping connection", conn.peer, first["type"])
            return
        worker_id = self.on_register(first, conn)
        try:
            while True:
                msg = await conn.recv()
                if msg is None:
                    break
                self.on_message(worker_id, msg)
        finally:
            w = self.workers.get(worker_id)
            if w is not None and w.conn is conn and w.alive:
                if self._shutting_down:
                    w.state = WorkerState.LOST
                    self._log("WORKER_EXIT", worker_id=worker_id)
                else:
                    self.on_worker_lost(worker_id, reason="connection closed")

    def on_register(self, msg: dict, conn: Optional[Connection]) -> str:
        worker_id = msg["worker_id"]
        old = self.workers.get(worker_id)
        if old is not None and old.alive:
            self.on_worker_lost(worker_id, reason="re-registered")
        try:
            gpu = self.config.gpu(msg["gpu_model"])
        except ValueError:
            gpu = GpuModel(msg["gpu_model"], 0, 1.0, next(iter(self.config.catalog.values())).gpu_load_bandwidth)
        now = self.clock.now()
        w = WorkerDescriptor(
            worker_id=worker_id,
            address=msg.get("address"),
            gpu=gpu,
            resources=ResourceRequest(**msg["resources"]),
            conn=conn,
            cached_blobs=set(msg["cache_inventory"]),
            seq=next(self._worker_seq),
            connected_at=now,
            last_seen=now,
            state=WorkerState.IDLE,
        )
        self.workers[worker_id] = w
        self.worker_log.append((now, worker_id, "ARRIVE", gpu.name))
        self._log("REGISTER", worker_id=worker_id, gpu=gpu.name, cached=len(w.cached_blobs))
        self._sample()
        self.schedule_round()
        return worker_id

    def on_message(self, worker_id: str, msg: dict) -> None:
        w = self.workers.get(worker_id)
        if w is None or not w.alive:
            self.stale_results += msg["type"] == "RESULT"
            return
        w.last_seen = self.clock.now()
        kind = msg["type"]
        if kind == "RESULT":
            self.on_result(worker_id, msg)
        elif kind == "CONTEXT_READY":
            self.on_context_ready(worker_id, msg)
        elif kind == "ERROR":
            self.on_error(worker_id, msg)
        elif kind == "HEARTBEAT":
            pass
        else:
            self.anomalies.append(f"{worker_id}: unexpected {kind}")

    def on_context_ready(self, worker_id: str, msg: dict) -> None:
        w = self.workers[worker_id]
        ctx = msg["context_id"]
        recipe = self.recipes.get(ctx)
        if w.installing != ctx:
            self.anomalies.append(f"{worker_id}: CONTEXT_READY for {ctx} without a directive")
        self._release_source(w)
        w.hosted_contexts = {ctx}
        if recipe is not None:
            w.cached_blobs |= set(recipe.blobs())
        w.installing = None
        w.state = WorkerState.IDLE
        directed = self._pending_installs.pop(worker_id, None)
        self.installs.append(
            InstallRecord(
                worker_id, ctx, directed or "?", msg.get("source", "?"), float(msg["build_seconds"]),
                self.clock.now(), w.install_started - w.connected_at,
            )
        )
        self._log("CONTEXT_READY", worker_id=worker_id, context_id=ctx, source=msg.get("source"),
                  build_seconds=msg["build_seconds"])
        self._sample()
        self.schedule_round()

    def on_error(self, worker_id: str, msg: dict) -> None:
        w = self.workers[worker_id]
        code = msg["code"]
        self._log("WORKER_ERROR", worker_id=worker_id, code=code)
        if code == "INSUFFICIENT_DISK":
            self._release_source(w)
            w.cannot_host.add(msg.get("context_id"))
            w.installing = None
            w.state = WorkerState.IDLE
            self._pending_installs.pop(worker_id, None)
        elif code == "CONTEXT_MISSING":
            entry = self.ledger.get(msg.get("task_id"))
            w.hosted_contexts.discard(msg.get("context_id"))
            if entry is not None and entry.state is TaskState.DISPATCHED and entry.worker_id == worker_id:
                self._requeue(entry, "context missing")
            w.current_task = None
            w.state = WorkerState.IDLE
        else:
            self.anomalies.append(f"{worker_id}: error {code}")
        self.schedule_round()

    def on_result(self, worker_id: str, msg: dict) -> None:
        task_id = msg["task_id"]
        entry = self.ledger.get(task_id)
        w = self.workers.get(worker_id)
        if w is not None and w.current_task == task_id:
            w.current_task = None
            if w.alive:
                w.state = WorkerState.IDLE
        if entry is None:
            self.anomalies.append(f"RESULT for unknown task {task_id} from {worker_id}")
            log.warning("RESULT for unknown task %s from %s", task_id, worker_id)
            if w is not None and w.conn is not None:
                w.conn.send(protocol.message("ERROR", code="UNKNOWN_TASK", task_id=task_id))
            self.schedule_round()
            return
        if entry.state is not TaskState.DISPATCHED or msg["attempt"] != entry.attempt or entry.worker_id != worker_id:
            self.stale_results += 1
            self._log("STALE_RESULT", task_id=task_id, attempt=msg["attempt"], worker_id=worker_id)
            self.schedule_round()
            return
        returned = sorted(r["item_id"] for r in msg["item_results"])
        expected = sorted(i.item_id for i in entry.task.items)
        if returned != expected:
            self.anomalies.append(f"RESULT for {task_id} does not cover its items")
            self._requeue(entry, "incomplete result")
            self.schedule_round()
            return
        now = self.clock.now()
        if task_id in self._credited:
            self.duplicate_credits += 1
        self._credited.add(task_id)
        entry.state = TaskState.DONE
        entry.accepted_attempt = msg["attempt"]
        entry.completed_at = now
        entry.timings = msg.get("timings")
        self.completed_items += len(returned)
        self._completion_chunks.append((now, len(returned)))
        self._outstanding -= 1
        self._log("DONE", task_id=task_id, attempt=msg["attempt"], worker_id=worker_id, items=len(returned))
        self._sample()
        if self._outstanding == 0:
            self._drained.set()
        self.schedule_round()

    def on_worker_lost(self, worker_id: str, reason: str = "lost") -> None:
        w = self.workers.get(worker_id)
        if w is None or not w.alive:
            return
        now = self.clock.now()
        w.state = WorkerState.LOST
        self.worker_log.append((now, worker_id, "LOST", w.gpu.name))
        self._log("WORKER_LOST", worker_id=worker_id, reason=reason, task_id=w.current_task)
        if w.current_task is not None:
            entry = self.ledger[w.current_task]
            if entry.state is TaskState.DISPATCHED and entry.worker_id == worker_id:
                self._requeue(entry, f"worker {worker_id} lost")
            w.current_task = None
        self._release_source(w)
        self._pending_installs.pop(worker_id, None)
        w.installing = None
        w.hosted_contexts = set()
        w.cached_blobs = set()
        if w.conn is not None:
            w.conn.close()
        self._sample()
        self._signal()
        self.schedule_round()

    def check_heartbeats(self) -> None:
        cutoff = self.clock.now() - self.heartbeat_timeout
        for w in list(self.workers.values()):
            if w.alive and w.last_seen < cutoff:
                self.on_worker_lost(w.worker_id, reason="heartbeat timeout")

    # -- placement ----------------------------------------------------------

    def _release_source(self, w: WorkerDescriptor) -> None:
        if w.install_from is not None:
            holder = self.workers.get(w.install_from)
            if holder is not None:
                holder.active_serves = max(0, holder.active_serves - 1)
            w.install_from = None

    def holders(self, context_id: str, exclude: Optional[str] = None) -> list[WorkerDescriptor]:
        recipe = self.recipes.get(context_id)
        needed = set(recipe.blobs()) if recipe else set()
        return [
            w for w in self.workers.values()
            if w.alive and w.worker_id != exclude and w.address is not None
            and (context_id in w.hosted_contexts or (needed and needed <= w.cached_blobs))
        ]

    def choose_source(self, worker_id: str, context_id: str):
        """``"fs"``, ``{"peer": address}``, or None to wait for a free peer slot."""
        if not self.config.peer_transfer:
            return "fs", None
        holders = self.holders(context_id, exclude=worker_id)
        if not holders:
            return "fs", None
        free = [h for h in holders if h.active_serves < self.config.max_concurrent_peer_serves]
        if not free:
            return None, None
        best = min(free, key=lambda h: (h.active_serves, -h.gpu.speed_factor, h.seq))
        return {"peer": best.address}, best

    def install_context(self, worker_id: str, recipe: ContextRecipe) -> bool:
        w = self.workers[worker_id]
        if not w.alive:
            return False
        source, holder = self.choose_source(worker_id, recipe.context_id)
        if source is None:
            return False
        if holder is not None:
            holder.active_serves += 1
            w.install_from = holder.worker_id
        w.state = WorkerState.INSTALLING
        w.installing = recipe.context_id
        w.install_started = self.clock.now()
        w.hosted_contexts = set()
        label = "fs" if source == "fs" else f"peer:{holder.worker_id}"
        self._pending_installs[worker_id] = "fs" if source == "fs" else "peer"
        self.directives.append((worker_id, recipe.context_id, label))
        self._log("INSTALL_CONTEXT", worker_id=worker_id, context_id=recipe.context_id, source=label)
        if w.conn is not None and not w.conn.send(
            protocol.message("INSTALL_CONTEXT", recipe=recipe.to_dict(), source=source)
        ):
            self.on_worker_lost(worker_id, reason="directive undeliverable")
            return False
        return True

    def _dispatch(self, task_id: str, w: WorkerDescriptor) -> None:
        entry = self.ledger[task_id]
        task = entry.task
        now = self.clock.now()
        entry.state = TaskState.DISPATCHED
        entry.worker_id = w.worker_id
        entry.dispatched_at = now
        self.last_dispatch_at = now
        w.state = WorkerState.BUSY
        w.current_task = task_id
        self.placements.append((task_id, w.worker_id))
        msg = {
            "type": "INVOKE",
            "task_id": task_id,
            "attempt": entry.attempt,
            "awareness": task.awareness.value,
            "items": [{"item_id": i.item_id, "payload_bytes": i.payload_bytes, "cost_units": i.cost_units}
                      for i in task.items],
        }
        if task.context_id is not None:
            msg["context_id"] = task.context_id
        if task.awareness is not Awareness.FULL:
            msg["inputs"] = task.recipe.to_dict()
        self._log("DISPATCH", task_id=task_id, attempt=entry.attempt, worker_id=w.worker_id)
        if w.conn is not None and not w.conn.send(msg):
            self.on_worker_lost(w.worker_id, reason="invoke undeliverable")

    def _pop_ready(self, key: Optional[str]) -> Optional[str]:
        q = self._ready.get(key)
        while q:
            task_id = q.popleft()
            self._ready_count -= 1
            if self.ledger[task_id].state is TaskState.READY:
                return task_id
        return None

    def _peek_seq(self, key: Optional[str]) -> Optional[int]:
        q = self._ready.get(key)
        return self.ledger[q[0]].seq if q else None

    @staticmethod
    def _order(w: WorkerDescriptor):
        return (-w.gpu.speed_factor, w.seq)

    def schedule_round(self) -> list[tuple[str, str]]:
        """Place READY tasks on IDLE workers, at most one task per worker."""
        if self._scheduling:
            self._again = True
            return []
        self._scheduling = True
        placed: list[tuple[str, str]] = []
        try:
            self._again = True
            while self._again:
                self._again = False
                placed += self._schedule_round()
        finally:
            self._scheduling = False
        return placed

    def _schedule_round(self) -> list[tuple[str, str]]:
        placed: list[tuple[str, str]] = []
        if self._ready_count == 0:
            return placed
        idle = sorted((w for w in self.workers.values() if w.state is WorkerState.IDLE), key=self._order)
        if not idle:
            return placed

        # (1) FULL tasks onto workers already hosting their context
        free = []
        for w in idle:
            hosted = [c for c in w.hosted_contexts if self._ready.get(c)]
            task_id = self._pop_ready(min(hosted, key=self._peek_seq)) if hosted else None
            if task_id is None:
                free.append(w)
                continue
            self._dispatch(task_id, w)
            placed.append((task_id, w.worker_id))

        # (2) tasks that workers already installing will absorb need nothing;
        # (3) the rest trigger installs on free workers, fastest first
        for ctx in [k for k, q in self._ready.items() if k is not None and q]:
            installing = sum(1 for w in self.workers.values() if w.alive and w.installing == ctx)
            need = len(self._ready[ctx]) - installing
            candidates = sorted(
                (w for w in free if w.state is WorkerState.IDLE and ctx not in w.cannot_host),
                key=lambda w: (bool(w.hosted_contexts), self._order(w)),
            )
            for w in candidates:
                if need <= 0:
                    break
                if self.install_context(w.worker_id, self.recipes[ctx]):
                    need -= 1
                elif w.alive:
                    # no peer slot free; retried when a transfer finishes
                    break

        # (4) AGNOSTIC / PARTIAL tasks onto any remaining idle worker
        for w in free:
            q = self._ready.get(None)
            if not q:
                break
            if w.state is not WorkerState.IDLE:
                continue
            if not self.ledger[q[0]].task.resources.fits(w.resources):
                continue
            task_id = self._pop_ready(None)
            if task_id is None:
                break
            self._dispatch(task_id, w)
            placed.append((task_id, w.worker_id))
        return placed

    # -- driving ------------------------------------------------------------

    def completion_times(self) -> np.ndarray:
        if not self._completion_chunks:
            return np.zeros(0)
        times = np.array([t for t, _ in self._completion_chunks])
        counts = np.array([n for _, n in self._completion_chunks])
        return np.repeat(times, counts)

    def report(self, drained: bool = True, diagnostic: str = "") -> ExperimentReport:
        end = max((e.completed_at for e in self.ledger.values() if e.completed_at is not None), default=0.0)
        return ExperimentReport(
            end_to_end=end if drained else self.clock.now(),
            submitted_items=self.submitted_items,
            completed_items=self.completed_items,
            item_completion_times=self.completion_times(),
            samples=list(self.samples),
            task_timings={tid: e.timings for tid, e in self.ledger.items() if e.timings is not None},
            worker_log=list(self.worker_log),
            installs=list(self.installs),
            duplicate_credits=self.duplicate_credits,
            stale_results=self.stale_results,
            drained=drained,
            diagnostic=diagnostic,
            last_dispatch_at=self.last_dispatch_at,
        )

    async def _grid(self) -> None:
        while True:
            await self.clock.sleep(self.sample_interval)
            self._sample()

    async def _watchdog(self) -> None:
        while True:
            await self.clock.sleep(self.config.heartbeat_interval)
            self.check_heartbeats()

    async def run_until_drained(
        self,
        arrivals_pending: Optional[Callable[[], bool]] = None,
        idle_grace: float = 600.0,
    ) -> ExperimentReport:
        """Wait until every task is DONE.

        Raises :class:`PoolDepleted` if no worker is connected while tasks
        remain and either ``arrivals_pending()`` says nobody else is coming
        or, without that hint, the pool stays empty for ``idle_grace``.
        """
        if self._outstanding == 0:
            return self.report()
        self._sample()
        helpers = [asyncio.ensure_future(self._grid()), asyncio.ensure_future(self._watchdog())]
        empty_since: Optional[float] = None
        try:
            while self._outstanding > 0:
                self._changed.clear()
                waiter = asyncio.ensure_future(self._drained.wait())
                changed = asyncio.ensure_future(self._changed.wait())
                timeout = self.clock.wall(self.config.heartbeat_interval)
                await asyncio.wait({waiter, changed}, timeout=timeout, return_when=asyncio.FIRST_COMPLETED)
                waiter.cancel()
                changed.cancel()
                if self._outstanding == 0:
                    break
                if self.connected() == 0:
                    if arrivals_pending is not None:
                        if not arrivals_pending():
                            self._raise_depleted()
                    else:
                        now = self.clock.now()
                        empty_since = now if empty_since is None else empty_since
                        if now - empty_since >= idle_grace:
                            self._raise_depleted()
                else:
                    empty_since = None
        finally:
            for h in helpers:
                h.cancel()
        self._sample()
        return self.report()

    def _raise_depleted(self):
        self._sample()
        msg = (
            f"worker pool depleted at t={self.clock.now():.1f}: "
            f"{self._outstanding} tasks outstanding, {self.completed_items}/{self.submitted_items} items done"
        )
        self._log("DEPLETED", outstanding=self._outstanding)
        raise PoolDepleted(msg, self.report(drained=False, diagnostic=msg))

    def shutdown_workers(self) -> None:
        self._shutting_down = True
        for w in self.workers.values():
            if w.alive and w.conn is not None:
                w.conn.send(protocol.message("SHUTDOWN"))


def jsonl_sink(path) -> Callable[[dict], None]:
    fh = open(path, "w")

    def write(record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    write.close = fh.close  # type: ignore[attr-defined]
    return write
