"""Clocks, event loops and message transports.

The same scheduler, worker and filesystem coroutines run in two settings:

* live: real TCP sockets, ``asyncio.sleep`` of emulated seconds multiplied
  by ``time_scale``;
* emulated: in-memory connections on :class:`VirtualClockLoop`, whose clock
  jumps straight to the next timer whenever nothing is runnable.

Both carry the same length-prefixed frames from :mod:`ctxpool.protocol`.
"""

from __future__ import annotations

import asyncio
import collections
import logging
import math
import selectors
from typing import Awaitable, Callable, Optional

from . import protocol

log = logging.getLogger(__name__)

Handler = Callable[["Connection"], Awaitable[None]]


class StalledLoopError(RuntimeError):
    """The virtual loop has nothing runnable and no timer pending."""


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self):
        self._real = selectors.DefaultSelector()
        self.loop: Optional[VirtualClockLoop] = None

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def get_map(self):
        return self._real.get_map()

    def close(self):
        self._real.close()

    def select(self, timeout=None):
        ready = self._real.select(0)
        if ready:
            return ready
        if timeout is None:
            raise StalledLoopError("no runnable callbacks and no timers: every coroutine is blocked")
        if timeout > 0:
            self.loop._advance(timeout)
        return []


class VirtualClockLoop(asyncio.SelectorEventLoop):
    """Event loop whose ``time()`` only advances when the loop would block."""

    def __init__(self):
        selector = _VirtualSelector()
        super().__init__(selector)
        selector.loop = self
        self._vtime = 0.0

    def time(self) -> float:
        return self._vtime

    def _advance(self, dt: float) -> None:
        self._vtime += dt


def run_virtual(coro):
    loop = VirtualClockLoop()
    try:
        return loop.run_until_complete(coro)
    finally:
        try:
            leftovers = asyncio.all_tasks(loop)
            for task in leftovers:
                task.cancel()
            if leftovers:
                loop.run_until_complete(asyncio.gather(*leftovers, return_exceptions=True))
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            loop.close()


class Clock:
    """Emulated time on top of an asyncio loop.

    ``now()`` reports emulated seconds since construction; ``sleep(s)`` waits
    ``s`` emulated seconds, which is ``s * time_scale`` on the loop's clock
    rounded up to ``quantum``.
    """

    def __init__(self, time_scale: float = 1.0, quantum: float = 0.0):
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.time_scale = time_scale
        self.quantum = quantum
        self._loop = asyncio.get_running_loop()
        self._t0 = self._loop.time()

    def now(self) -> float:
        return (self._loop.time() - self._t0) / self.time_scale

    def wall(self, emulated: float) -> float:
        if emulated <= 0:
            return 0.0
        w = emulated * self.time_scale
        if self.quantum:
            w = math.ceil(w / self.quantum) * self.quantum
        return w

    async def sleep(self, emulated: float) -> None:
        await asyncio.sleep(self.wall(emulated))

    def call_later(self, emulated: float, callback, *args) -> asyncio.TimerHandle:
        return self._loop.call_later(self.wall(emulated), callback, *args)


class Connection:
    """One end of a framed, bidirectional message channel."""

    peer: str = "?"

    def send(self, msg: dict) -> bool:
        raise NotImplementedError

    async def recv(self) -> Optional[dict]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        raise NotImplementedError


_EOF = object()


class MemoryConnection(Connection):
    """In-process connection; bytes still pass through the frame codec."""

    def __init__(self, peer: str):
        self.peer = peer
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._decoder = protocol.FrameDecoder()
        self._pending: collections.deque = collections.deque()
        self._other: Optional[MemoryConnection] = None
        self._closed = False
        self.bytes_sent = 0

    @classmethod
    def pair(cls, a: str, b: str) -> tuple["MemoryConnection", "MemoryConnection"]:
        left, right = cls(b), cls(a)
        left._other, right._other = right, left
        return left, right

    def send(self, msg: dict) -> bool:
        if self._closed:
            return False
        data = protocol.encode(msg)
        self.bytes_sent += len(data)
        self._other._inbox.put_nowait(data)
        return True

    async def recv(self) -> Optional[dict]:
        while not self._pending:
            data = await self._inbox.get()
            if data is _EOF:
                self._inbox.put_nowait(_EOF)
                return None
            self._pending.extend(self._decoder.feed(data))
        return self._pending.popleft()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._inbox.put_nowait(_EOF)
        other = self._other
        if other is not None and not other._closed:
            other._closed = True
            other._inbox.put_nowait(_EOF)

    @property
    def closed(self) -> bool:
        return self._closed


class StreamConnection(Connection):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer
        self._decoder = protocol.FrameDecoder()
        self._pending: collections.deque = collections.deque()
        self._closed = False
        info = writer.get_extra_info("peername")
        self.peer = f"{info[0]}:{info[1]}" if info else "?"

    def send(self, msg: dict) -> bool:
        if self._closed or self._writer.is_closing():
            return False
        self._writer.write(protocol.encode(msg))
        return True

    async def recv(self) -> Optional[dict]:
        while not self._pending:
            if self._closed:
                return None
            try:
                data = await self._reader.read(65536)
            except (ConnectionError, OSError):
                data = b""
            if not data:
                self._closed = True
                if self._decoder.pending:
                    log.debug("connection to %s closed mid-frame", self.peer)
                return None
            self._pending.extend(self._decoder.feed(data))
        return self._pending.popleft()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._writer.close()

    @property
    def closed(self) -> bool:
        return self._closed or self._writer.is_closing()


class Listener:
    def __init__(self, close_cb, address: Optional[str] = None):
        self._close_cb = close_cb
        self.address = address

    def close(self) -> None:
        self._close_cb()


class MemoryNetwork:
    """Address registry for :class:`MemoryConnection` endpoints."""

    def __init__(self):
        self._handlers: dict[str, Handler] = {}
        self._tasks: set[asyncio.Task] = set()

    async def listen(self, address: str, handler: Handler) -> Listener:
        if address in self._handlers:
            raise OSError(f"address {address} already in use")
        self._handlers[address] = handler
        return Listener(lambda: self._handlers.pop(address, None), address)

    async def connect(self, address: str, local: str = "client") -> Connection:
        handler = self._handlers.get(address)
        if handler is None:
            raise ConnectionRefusedError(f"nothing listening on {address}")
        client, server = MemoryConnection.pair(local, address)
        task = asyncio.get_running_loop().create_task(self._serve(handler, server))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return client

    @staticmethod
    async def _serve(handler: Handler, conn: Connection) -> None:
        try:
            await handler(conn)
        finally:
            conn.close()


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpNetwork:
    async def listen(self, address: str, handler: Handler) -> Listener:
        host, port = split_address(address)

        async def on_client(reader, writer):
            conn = StreamConnection(reader, writer)
            try:
                await handler(conn)
            finally:
                conn.close()

        server = await asyncio.start_server(on_client, host, port)
        bound = server.sockets[0].getsockname()
        return Listener(server.close, f"{bound[0]}:{bound[1]}")

    async def connect(self, address: str, local: str = "client") -> Connection:
        host, port = split_address(address)
        reader, writer = await asyncio.open_connection(host, port)
        return StreamConnection(reader, writer)
