"""The pilot-job worker.

A worker registers with the scheduler, keeps a content-addressed cache of
blobs, hosts at most one materialized context, runs invocations one at a
time in throwaway sandboxes, and serves cached context blobs to peers.
Emulated stages are charged by sleeping on the worker's :class:`Clock`.
"""

from __future__ import annotations

import asyncio
import enum
import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import protocol
from .core import (
    Awareness,
    Config,
    ContextRecipe,
    GpuModel,
    ResourceRequest,
    Stage,
    verdict_for,
)
from .fsemu import FsClient
from .net import Clock, Connection

log = logging.getLogger(__name__)


class WorkerExit(Exception):
    def __init__(self, code: int, reason: str):
        super().__init__(reason)
        self.code = code


EXIT_OK = 0
EXIT_LOST = 4  # scheduler connection dropped without SHUTDOWN
EXIT_UNREACHABLE = 6


class CacheKind(str, enum.Enum):
    DEPENDENCIES = "DEPENDENCIES"
    MODEL_BLOB = "MODEL_BLOB"
    CODE = "CODE"
    INVOCATION_INPUT = "INVOCATION_INPUT"


class Source(str, enum.Enum):
    FS = "FS"
    PEER = "PEER"
    SCHEDULER = "SCHEDULER"


@dataclass
class CacheEntry:
    key: str
    declared_bytes: int
    kind: CacheKind
    acquired_from: Source
    acquired_at: float


class InsufficientDisk(Exception):
    pass


class BlobCache:
    """Declared-size cache bounded by the worker's disk capacity.

    Eviction is least-recently-acquired, invocation inputs before anything
    else, and only happens to make room for a new entry.
    """

    def __init__(self, capacity: int, directory: Optional[Path] = None):
        self.capacity = capacity
        self.directory = Path(directory) if directory else None
        self.entries: dict[str, CacheEntry] = {}
        self.used = 0
        self.lock = asyncio.Lock()
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load()

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def inventory(self) -> list[str]:
        return sorted(k for k, e in self.entries.items() if e.kind is not CacheKind.INVOCATION_INPUT)

    def missing(self, blobs: dict[str, tuple[str, int]]) -> dict[str, tuple[str, int]]:
        return {k: v for k, v in blobs.items() if k not in self.entries}

    def context_blobs(self, context_id: str) -> list[CacheEntry]:
        prefix = context_id + ":"
        return [e for k, e in self.entries.items() if k.startswith(prefix)]

    def make_room(self, nbytes: int, protect: frozenset = frozenset()) -> None:
        if nbytes > self.capacity:
            raise InsufficientDisk(f"{nbytes} bytes exceed disk capacity {self.capacity}")
        free = self.capacity - self.used
        if free >= nbytes:
            return
        victims = sorted(
            (e for e in self.entries.values() if e.key not in protect),
            key=lambda e: (e.kind is not CacheKind.INVOCATION_INPUT, e.acquired_at),
        )
        for entry in victims:
            if free >= nbytes:
                break
            del self.entries[entry.key]
            self.used -= entry.declared_bytes
            free += entry.declared_bytes
        if free < nbytes:
            raise InsufficientDisk(f"cannot free {nbytes} bytes")
        self._save()

    def put(self, key: str, nbytes: int, kind: CacheKind, source: Source, now: float) -> None:
        if key in self.entries:
            return
        self.make_room(nbytes)
        self.entries[key] = CacheEntry(key, nbytes, CacheKind(kind), source, now)
        self.used += nbytes
        if kind is not CacheKind.INVOCATION_INPUT:
            self._save()

    def _manifest(self) -> Optional[Path]:
        return self.directory / "manifest.json" if self.directory else None

    def _save(self) -> None:
        path = self._manifest()
        if path is None:
            return
        rows = [
            {"key": e.key, "declared_bytes": e.declared_bytes, "kind": e.kind.value,
             "acquired_from": e.acquired_from.value, "acquired_at": e.acquired_at}
            for e in self.entries.values()
            if e.kind is not CacheKind.INVOCATION_INPUT
        ]
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(rows))
        os.replace(tmp, path)

    def _load(self) -> None:
        path = self._manifest()
        if not path.exists():
            return
        for row in json.loads(path.read_text()):
            self.entries[row["key"]] = CacheEntry(
                row["key"], int(row["declared_bytes"]), CacheKind(row["kind"]),
                Source(row["acquired_from"]), float(row["acquired_at"]),
            )
            self.used += int(row["declared_bytes"])


class Sandbox:
    """Per-invocation working area.  On-disk only when the worker has a cache directory."""

    def __init__(self, invocation_id: str, root: Optional[Path] = None):
        self.invocation_id = invocation_id
        self.files: dict[str, bytes] = {}
        self.path = None
        if root:
            Path(root).mkdir(parents=True, exist_ok=True)
            self.path = Path(tempfile.mkdtemp(prefix=f"{invocation_id}-", dir=root))
        self.state = "created"

    def write(self, name: str, data: bytes) -> None:
        self.files[name] = data
        if self.path:
            (self.path / name).write_bytes(data)

    def listing(self) -> list[str]:
        if self.path:
            return sorted(p.name for p in self.path.iterdir())
        return sorted(self.files)

    def reap(self) -> None:
        if self.path:
            shutil.rmtree(self.path, ignore_errors=True)
        self.files.clear()
        self.state = "reaped"


class ContextHost:
    """Materializes and holds one context; invocations run against it.

    Lives inside the worker process; the worker talks to it only through
    ``build`` and ``invoke`` so it could be split into its own process.
    """

    def __init__(self, gpu: GpuModel, config: Config, clock: Clock):
        self.gpu = gpu
        self.cost = config.cost
        self.clock = clock
        self.context_id: Optional[str] = None
        self.builds = 0

    async def build(self, recipe: ContextRecipe) -> dict[str, float]:
        self.context_id = None
        timings = await load_model(recipe, self.gpu, self.cost, self.clock)
        self.context_id = recipe.context_id
        self.builds += 1
        return timings

    def holds(self, context_id: Optional[str]) -> bool:
        return context_id is not None and self.context_id == context_id

    async def invoke(self, sandbox: Sandbox, items: list[dict]) -> tuple[list[dict], dict[str, float]]:
        return await run_items(sandbox, items, self.gpu, self.cost, self.clock)


async def load_model(recipe: ContextRecipe, gpu: GpuModel, cost, clock: Clock) -> dict[str, float]:
    timings = {}
    if recipe.builder.disk_load:
        timings["disk_load"] = cost.stage_duration(Stage.DISK_LOAD, recipe.model_bytes)
        await clock.sleep(timings["disk_load"])
    if recipe.builder.gpu_load:
        timings["gpu_load"] = cost.stage_duration(Stage.GPU_LOAD, recipe.model_bytes, gpu)
        await clock.sleep(timings["gpu_load"])
    return timings


async def run_items(sandbox: Sandbox, items: list[dict], gpu: GpuModel, cost, clock: Clock):
    timings = {"dispatch": cost.stage_duration(Stage.DISPATCH)}
    await clock.sleep(timings["dispatch"])
    units = sum(float(i.get("cost_units", 1.0)) for i in items)
    timings["infer"] = cost.stage_duration(Stage.INFER, units, gpu)
    await clock.sleep(timings["infer"])
    results = [{"item_id": i["item_id"], "verdict_token": verdict_for(i["item_id"])} for i in items]
    sandbox.write("result.json", json.dumps(results).encode())
    sandbox.state = "executed"
    return results, timings


def _merge(into: dict, extra: dict) -> dict:
    for k, v in extra.items():
        into[k] = into.get(k, 0.0) + v
    return into


class Worker:
    def __init__(
        self,
        worker_id: str,
        gpu: GpuModel,
        config: Config,
        network,
        scheduler_address: str,
        fs_address: Optional[str] = None,
        peer_address: Optional[str] = None,
        cache_dir: Optional[os.PathLike] = None,
        capacity: Optional[ResourceRequest] = None,
        clock: Optional[Clock] = None,
        connect_retries: int = 5,
        retry_base_delay: float = 1.0,
    ):
        self.worker_id = worker_id
        self.gpu = gpu
        self.config = config
        self.cost = config.cost
        self.network = network
        self.scheduler_address = scheduler_address
        self.fs_address = fs_address
        self.peer_address = peer_address
        self.capacity = capacity or config.worker_capacity
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.cache = BlobCache(self.capacity.disk_bytes, self.cache_dir / "blobs" if self.cache_dir else None)
        self.clock = clock
        self.connect_retries = connect_retries
        self.retry_base_delay = retry_base_delay
        self.host: Optional[ContextHost] = None
        self.active_serves = 0
        self.serves_completed = 0
        self.sandboxes_created = 0
        self._conns: list[Connection] = []
        self._tasks: set[asyncio.Task] = set()
        self._listener = None
        self._sched: Optional[Connection] = None
        self._fs: Optional[FsClient] = None
        self._jobs: asyncio.Queue = None
        self._aborted = False
        self.shutdown_requested = False

    # -- lifecycle -------------------------------------------------------

    def preload(self, recipe: ContextRecipe, now: float = 0.0) -> None:
        """Populate the cache as if it survived from an earlier run."""
        for key, (kind, size) in recipe.blobs().items():
            self.cache.put(key, size, CacheKind(kind), Source.FS, now)

    async def run(self) -> int:
        if self.clock is None:
            self.clock = Clock(self.cost.time_scale)
        self.host = ContextHost(self.gpu, self.config, self.clock)
        self._jobs = asyncio.Queue()
        if self.peer_address is not None:
            self._listener = await self.network.listen(self.peer_address, self._serve_peer_conn)
            self.peer_address = getattr(self._listener, "address", None) or self.peer_address
        try:
            self._sched = await self._connect_with_backoff()
            self._conns.append(self._sched)
            self._send(self._register_msg())
            self._spawn(self._heartbeat())
            self._spawn(self._executor())
            while True:
                msg = await self._sched.recv()
                if msg is None:
                    break
                if msg["type"] == "SHUTDOWN":
                    self.shutdown_requested = True
                    break
                if msg["type"] in ("INSTALL_CONTEXT", "INVOKE"):
                    self._jobs.put_nowait(msg)
                elif msg["type"] == "ERROR":
                    log.warning("%s: scheduler rejected a message: %s", self.worker_id, msg)
                else:
                    log.warning("%s: unexpected %s", self.worker_id, msg["type"])
        finally:
            self._teardown()
        if self.shutdown_requested:
            return EXIT_OK
        raise WorkerExit(EXIT_LOST, "scheduler connection lost")

    def abort(self) -> None:
        """Abrupt preemption: drop every connection first, then stop all activity."""
        self._aborted = True
        for conn in self._conns:
            conn.close()
        self._teardown()

    def _teardown(self) -> None:
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for conn in self._conns:
            conn.close()
        current = asyncio.current_task()
        for task in list(self._tasks):
            if task is not current:
                task.cancel()

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _connect_with_backoff(self) -> Connection:
        delay = self.retry_base_delay
        for attempt in range(self.connect_retries + 1):
            try:
                return await self.network.connect(self.scheduler_address, local=self.worker_id)
            except OSError as exc:
                if attempt == self.connect_retries:
                    raise WorkerExit(EXIT_UNREACHABLE, f"scheduler unreachable: {exc}") from exc
                await self.clock.sleep(delay)
                delay = min(delay * 2, 60.0)
        raise AssertionError("unreachable")

    def _register_msg(self) -> dict:
        r = self.capacity
        return protocol.message(
            "REGISTER",
            worker_id=self.worker_id,
            gpu_model=self.gpu.name,
            resources={"cores": r.cores, "memory_bytes": r.memory_bytes, "disk_bytes": r.disk_bytes, "gpus": r.gpus},
            cache_inventory=self.cache.inventory(),
            address=self.peer_address,
        )

    def _send(self, msg: dict) -> bool:
        if self._aborted or self._sched is None:
            return False
        return self._sched.send(msg)

    async def _heartbeat(self) -> None:
        while True:
            await self.clock.sleep(self.config.heartbeat_interval)
            self._send(protocol.message("HEARTBEAT", worker_id=self.worker_id, emulated_clock=self.clock.now()))

    async def _executor(self) -> None:
        while True:
            msg = await self._jobs.get()
            try:
                if msg["type"] == "INSTALL_CONTEXT":
                    reply = await self.handle_install(msg)
                else:
                    reply = await self.handle_invoke(msg)
            except Exception:
                # Dropping the session makes the scheduler requeue whatever we held.
                log.exception("%s: %s failed, leaving the pool", self.worker_id, msg["type"])
                if self._sched is not None:
                    self._sched.close()
                return
            self._send(reply)

    async def _fs_client(self) -> FsClient:
        if self._fs is None or self._fs.conn.closed:
            if self.fs_address is None:
                raise ConnectionError("worker has no filesystem endpoint")
            conn = await self.network.connect(self.fs_address, local=self.worker_id)
            self._conns.append(conn)
            self._fs = FsClient(conn, self.worker_id)
        return self._fs

    # -- blob acquisition -----------------------------------------------

    async def _fetch_from_fs(self, nbytes: int, label: str) -> dict[str, float]:
        fs = await self._fs_client()
        timings = {"fs_fetch": await fs.fetch(nbytes, label)}
        # fetched bytes land on local disk before anything can read them
        timings["disk_write"] = self.cost.stage_duration(Stage.DISK_LOAD, nbytes)
        await self.clock.sleep(timings["disk_write"])
        return timings

    async def _fetch_from_peer(self, address: str, context_id: str) -> tuple[Optional[int], dict[str, float]]:
        """Returns declared bytes received, or None when the peer could not serve."""
        start = self.clock.now()
        try:
            conn = await self.network.connect(address, local=self.worker_id)
        except OSError:
            return None, {}
        self._conns.append(conn)
        try:
            conn.send(protocol.message("TRANSFER_GET", context_id=context_id))
            reply = await conn.recv()
        finally:
            conn.close()
            self._conns.remove(conn)
        if reply is None or reply["type"] != "TRANSFER_DATA":
            return None, {"peer_wait": self.clock.now() - start}
        nbytes = int(reply["declared_bytes"])
        timings = {"peer_fetch": self.clock.now() - start}
        timings["disk_write"] = self.cost.stage_duration(Stage.DISK_LOAD, nbytes)
        await self.clock.sleep(timings["disk_write"])
        return nbytes, timings

    def _store(self, blobs: dict[str, tuple[str, int]], source: Source) -> None:
        now = self.clock.now()
        for key, (kind, size) in blobs.items():
            self.cache.put(key, size, CacheKind(kind), source, now)

    # -- message handlers -----------------------------------------------

    async def handle_install(self, msg: dict) -> dict:
        recipe = ContextRecipe.from_dict(msg["recipe"])
        start = self.clock.now()
        timings: dict[str, float] = {}
        blobs = recipe.blobs()
        async with self.cache.lock:
            missing = self.cache.missing(blobs)
            need = sum(size for _, size in missing.values())
            try:
                self.cache.make_room(need, protect=frozenset(blobs))
            except InsufficientDisk as exc:
                return protocol.message(
                    "ERROR", code="INSUFFICIENT_DISK", context_id=recipe.context_id, detail=str(exc)
                )
            source = "cache"
            if missing:
                src = msg["source"]
                got = None
                if isinstance(src, dict) and "peer" in src:
                    got, t = await self._fetch_from_peer(src["peer"], recipe.context_id)
                    _merge(timings, t)
                    if got is not None:
                        self._store(missing, Source.PEER)
                        source = "peer"
                    else:
                        timings["fs_fallback"] = 1.0
                if got is None:
                    _merge(timings, await self._fetch_from_fs(need, "context"))
                    self._store(missing, Source.FS)
                    source = "fs"
        _merge(timings, await self.host.build(recipe))
        return protocol.message(
            "CONTEXT_READY",
            context_id=recipe.context_id,
            build_seconds=self.clock.now() - start,
            source=source,
            timings=timings,
        )

    async def handle_invoke(self, msg: dict) -> dict:
        awareness = Awareness(msg["awareness"])
        task_id, attempt = msg["task_id"], msg["attempt"]
        items = msg["items"]
        start = self.clock.now()
        timings: dict[str, float] = {}
        if awareness is Awareness.FULL and not self.host.holds(msg.get("context_id")):
            return protocol.message(
                "ERROR", code="CONTEXT_MISSING", task_id=task_id, attempt=attempt, context_id=msg.get("context_id")
            )
        invocation_id = f"{task_id}.{attempt}"
        payload = json.dumps(items, separators=(",", ":")).encode()
        input_key = "input:" + hashlib.sha256(payload).hexdigest()
        sandbox = Sandbox(invocation_id, self.cache_dir / "sandboxes" if self.cache_dir else None)
        self.sandboxes_created += 1
        try:
            async with self.cache.lock:
                self.cache.put(input_key, len(payload), CacheKind.INVOCATION_INPUT, Source.SCHEDULER, start)
            sandbox.write("input.json", payload)
            if awareness is Awareness.FULL:
                results, t = await self.host.invoke(sandbox, items)
                _merge(timings, t)
            else:
                recipe = ContextRecipe.from_dict(msg["inputs"])
                blobs = recipe.blobs()
                if awareness is Awareness.AGNOSTIC:
                    _merge(timings, await self._fetch_from_fs(recipe.total_bytes, "task"))
                else:
                    async with self.cache.lock:
                        missing = self.cache.missing(blobs)
                        need = sum(size for _, size in missing.values())
                        if missing:
                            self.cache.make_room(need, protect=frozenset(blobs))
                            _merge(timings, await self._fetch_from_fs(need, "task"))
                            self._store(missing, Source.FS)
                _merge(timings, await load_model(recipe, self.gpu, self.cost, self.clock))
                results, t = await run_items(sandbox, items, self.gpu, self.cost, self.clock)
                _merge(timings, t)
            timings["total"] = self.clock.now() - start
            return protocol.message(
                "RESULT", task_id=task_id, attempt=attempt, item_results=results, timings=timings
            )
        finally:
            sandbox.reap()

    # -- peer serving ----------------------------------------------------

    async def _serve_peer_conn(self, conn: Connection) -> None:
        self._conns.append(conn)
        try:
            msg = await conn.recv()
            if msg is None or msg["type"] != "TRANSFER_GET":
                return
            reply = await self.serve_peer(msg)
            conn.send(reply)
        finally:
            if conn in self._conns:
                self._conns.remove(conn)

    async def serve_peer(self, msg: dict) -> dict:
        context_id = msg["context_id"]
        entries = [e for e in self.cache.context_blobs(context_id) if e.kind is not CacheKind.CODE]
        if not entries:
            return protocol.message("ERROR", code="NOT_FOUND", context_id=context_id)
        if self.active_serves >= self.config.max_concurrent_peer_serves:
            return protocol.message("ERROR", code="BUSY", context_id=context_id)
        nbytes = sum(e.declared_bytes for e in entries)
        self.active_serves += 1
        try:
            await self.clock.sleep(self.cost.peer_seconds(nbytes))
        finally:
            self.active_serves -= 1
        self.serves_completed += 1
        return protocol.message("TRANSFER_DATA", context_id=context_id, declared_bytes=nbytes)
