"""Shared-filesystem contention emulator.

Concurrent readers split the aggregate bandwidth equally.  Rates only change
when a lease is admitted or finishes, so remaining bytes are integrated
piecewise-exactly between those boundaries.  At most ``max_ops`` leases are
active; further readers queue FIFO.
"""

from __future__ import annotations

import asyncio
import collections
import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

from . import protocol
from .net import Clock, Connection

log = logging.getLogger(__name__)


@dataclass
class FsLease:
    reader_id: str
    nbytes: float
    remaining: float
    requested_at: float
    admitted_at: Optional[float] = None
    done: asyncio.Future = field(default=None, repr=False)
    lease_id: int = 0


class FairShareFS:
    def __init__(self, clock: Clock, aggregate_bandwidth: float, max_ops: int = 94_000):
        if aggregate_bandwidth <= 0 or max_ops < 1:
            raise ValueError("bandwidth must be positive and max_ops >= 1")
        self.clock = clock
        self.aggregate_bandwidth = aggregate_bandwidth
        self.max_ops = max_ops
        self._active: dict[int, FsLease] = {}
        self._waiting: collections.deque[FsLease] = collections.deque()
        self._ids = itertools.count(1)
        self._last = clock.now()
        self._timer: Optional[asyncio.TimerHandle] = None
        self.fetch_count = 0
        self.completed_count = 0
        self.reclaimed_count = 0
        self.bytes_delivered = 0.0
        self.peak_active = 0
        self.labels: collections.Counter = collections.Counter()

    @property
    def active(self) -> int:
        return len(self._active)

    def rate(self) -> float:
        """Current per-reader bandwidth."""
        return self.aggregate_bandwidth / len(self._active) if self._active else self.aggregate_bandwidth

    def solo_seconds(self, nbytes: float) -> float:
        return nbytes / self.aggregate_bandwidth

    async def fetch(self, reader_id: str, nbytes: float, label: str = "") -> float:
        """Read ``nbytes``; returns emulated seconds from request to completion."""
        if nbytes <= 0:
            raise ValueError("fetch size must be positive")
        loop = asyncio.get_running_loop()
        now = self.clock.now()
        lease = FsLease(reader_id, nbytes, nbytes, now, done=loop.create_future(), lease_id=next(self._ids))
        self.fetch_count += 1
        self.labels[label] += 1
        self._integrate()
        self._waiting.append(lease)
        self._admit()
        self._reschedule()
        try:
            await lease.done
        except asyncio.CancelledError:
            self._reclaim(lease)
            raise
        return self.clock.now() - lease.requested_at

    def _reclaim(self, lease: FsLease) -> None:
        self._integrate()
        if self._active.pop(lease.lease_id, None) is not None or lease in self._waiting:
            if lease in self._waiting:
                self._waiting.remove(lease)
            self.reclaimed_count += 1
            log.debug("reclaimed lease of %s with %.0f bytes left", lease.reader_id, lease.remaining)
        self._admit()
        self._reschedule()

    def _integrate(self) -> None:
        now = self.clock.now()
        dt = now - self._last
        self._last = now
        if dt <= 0 or not self._active:
            return
        per_reader = self.aggregate_bandwidth / len(self._active)
        for lease in self._active.values():
            step = min(lease.remaining, per_reader * dt)
            lease.remaining -= step
            self.bytes_delivered += step

    def _admit(self) -> None:
        now = self.clock.now()
        while self._waiting and len(self._active) < self.max_ops:
            lease = self._waiting.popleft()
            lease.admitted_at = now
            self._active[lease.lease_id] = lease
        self.peak_active = max(self.peak_active, len(self._active))

    def _reschedule(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if not self._active:
            return
        per_reader = self.aggregate_bandwidth / len(self._active)
        soonest = min(lease.remaining for lease in self._active.values()) / per_reader
        self._timer = self.clock.call_later(max(soonest, 0.0), self._on_timer)

    def _on_timer(self) -> None:
        self._timer = None
        self._integrate()
        per_reader = self.aggregate_bandwidth / max(len(self._active), 1)
        # anything within a nanosecond of service is complete
        slack = per_reader * 1e-9 + 1e-6
        for lease_id, lease in list(self._active.items()):
            if lease.remaining <= slack:
                self.bytes_delivered += lease.remaining
                lease.remaining = 0.0
                del self._active[lease_id]
                self.completed_count += 1
                if not lease.done.done():
                    lease.done.set_result(None)
        self._admit()
        self._reschedule()


class FsServer:
    """Serves FS_FETCH requests for remote workers; a closed connection reclaims its leases."""

    def __init__(self, fs: FairShareFS):
        self.fs = fs

    async def handle(self, conn: Connection) -> None:
        pending: set[asyncio.Task] = set()
        try:
            while True:
                msg = await conn.recv()
                if msg is None:
                    break
                if msg["type"] != "FS_FETCH":
                    log.warning("fs endpoint ignoring %s", msg["type"])
                    continue
                task = asyncio.ensure_future(self._serve(conn, msg))
                pending.add(task)
                task.add_done_callback(pending.discard)
        finally:
            for task in pending:
                task.cancel()

    async def _serve(self, conn: Connection, msg: dict) -> None:
        seconds = await self.fs.fetch(msg["reader_id"], float(msg["nbytes"]), msg.get("label", ""))
        conn.send(protocol.message("FS_DONE", seconds=seconds, request_id=msg.get("request_id")))


class FsClient:
    def __init__(self, conn: Connection, reader_id: str):
        self.conn = conn
        self.reader_id = reader_id
        self._lock = asyncio.Lock()
        self._ids = itertools.count()

    async def fetch(self, nbytes: float, label: str = "") -> float:
        async with self._lock:
            rid = next(self._ids)
            if not self.conn.send(
                protocol.message("FS_FETCH", reader_id=self.reader_id, nbytes=nbytes, label=label, request_id=rid)
            ):
                raise ConnectionError("filesystem connection closed")
            while True:
                msg = await self.conn.recv()
                if msg is None:
                    raise ConnectionError("filesystem connection closed")
                if msg["type"] == "FS_DONE" and msg.get("request_id") == rid:
                    return float(msg["seconds"])
