import asyncio

import pytest
from conftest import A10, TITAN_X_PASCAL

from ctxpool import protocol
from ctxpool.core import GB, Awareness, Config, ContextRecipe, ResourceRequest, default_recipe
from ctxpool.fsemu import FairShareFS, FsServer
from ctxpool.net import Clock, MemoryNetwork, run_virtual
from ctxpool.worker import (
    EXIT_OK,
    EXIT_UNREACHABLE,
    BlobCache,
    CacheKind,
    ContextHost,
    InsufficientDisk,
    Sandbox,
    Source,
    Worker,
    WorkerExit,
)

CFG = Config()
COST = CFG.cost
RECIPE = default_recipe()
CTX = RECIPE.context_id

LOAD = 32.0
FS_SOLO = 14.2 * 8 / 84  # seconds for the whole context at the full FS link
DISK_WRITE = 14.2e9 / 240e6
PEER = 14.2 * 8 / 10


class World:
    def __init__(self):
        self.clock = Clock(1.0)
        self.net = MemoryNetwork()
        self.fs = FairShareFS(self.clock, COST.fs_aggregate_bandwidth, COST.fs_max_concurrent_ops)

    async def start(self):
        await self.net.listen("fs", FsServer(self.fs).handle)
        return self

    async def worker(self, wid, gpu=A10, cache_dir=None, capacity=None, listen=False, config=CFG):
        w = Worker(wid, config.gpu(gpu), config, self.net, "scheduler", fs_address="fs",
                   peer_address=f"{wid}:peer", cache_dir=cache_dir, capacity=capacity, clock=self.clock)
        w.host = ContextHost(w.gpu, config, self.clock)
        if listen:
            w._listener = await self.net.listen(w.peer_address, w._serve_peer_conn)
        return w


def install_msg(source="fs", recipe=RECIPE):
    return protocol.message("INSTALL_CONTEXT", recipe=recipe.to_dict(), source=source)


def invoke_msg(awareness, n=100, task_id="t", attempt=0):
    items = [{"item_id": f"c{i}", "payload_bytes": 256, "cost_units": 1.0} for i in range(n)]
    msg = {"type": "INVOKE", "task_id": task_id, "attempt": attempt, "awareness": awareness, "items": items}
    if awareness == "FULL":
        msg["context_id"] = CTX
    else:
        msg["inputs"] = RECIPE.to_dict()
    return protocol.validate(msg)


def run(coro):
    return run_virtual(coro)


def test_fresh_worker_has_empty_inventory():
    async def main():
        world = await World().start()
        w = await world.worker("w")
        return w._register_msg()

    assert run(main())["cache_inventory"] == []


def test_cold_install_from_fs_oracle():
    async def main():
        world = await World().start()
        w = await world.worker("w")
        return await w.handle_install(install_msg()), world.fs

    reply, fs = run(main())
    assert reply["type"] == "CONTEXT_READY" and reply["source"] == "fs"
    assert reply["build_seconds"] == pytest.approx(FS_SOLO + DISK_WRITE + LOAD, rel=1e-6)
    assert fs.labels["context"] == 1


def test_restart_with_surviving_cache_skips_fetch(tmp_path):
    async def first():
        world = await World().start()
        w = await world.worker("w", cache_dir=tmp_path)
        await w.handle_install(install_msg())

    async def second():
        world = await World().start()
        w = await world.worker("w", cache_dir=tmp_path)
        inventory = w._register_msg()["cache_inventory"]
        reply = await w.handle_install(install_msg())
        return inventory, reply, world.fs

    run(first())
    inventory, reply, fs = run(second())
    assert set(inventory) == set(RECIPE.blobs())
    assert reply["source"] == "cache"
    assert reply["build_seconds"] == pytest.approx(LOAD, rel=1e-6)
    assert fs.fetch_count == 0


def test_peer_install_uses_peer_link_and_leaves_fs_alone():
    async def main():
        world = await World().start()
        holder = await world.worker("h", listen=True)
        holder.preload(RECIPE)
        newcomer = await world.worker("n")
        reply = await newcomer.handle_install(install_msg({"peer": "h:peer"}))
        return reply, world.fs, holder

    reply, fs, holder = run(main())
    assert reply["source"] == "peer"
    assert reply["timings"]["peer_fetch"] == pytest.approx(PEER, rel=1e-6)
    assert reply["build_seconds"] == pytest.approx(PEER + DISK_WRITE + LOAD, rel=1e-6)
    assert fs.fetch_count == 0
    assert holder.serves_completed == 1


def test_full_invoke_costs_dispatch_plus_inference():
    async def main():
        world = await World().start()
        w = await world.worker("w")
        await w.handle_install(install_msg())
        return await w.handle_invoke(invoke_msg("FULL"))

    reply = run(main())
    expected = COST.invoke_dispatch_overhead_seconds + 100 * COST.per_inference_seconds_reference / 1.0
    assert reply["type"] == "RESULT"
    assert reply["timings"]["total"] == pytest.approx(expected, rel=1e-6)
    assert [r["item_id"] for r in reply["item_results"]] == [f"c{i}" for i in range(100)]


def test_full_invoke_on_titan_is_slower():
    async def main():
        world = await World().start()
        w = await world.worker("w", gpu=TITAN_X_PASCAL)
        await w.handle_install(install_msg())
        return await w.handle_invoke(invoke_msg("FULL"))

    assert run(main())["timings"]["infer"] == pytest.approx(2 * 100 * COST.per_inference_seconds_reference)


def test_full_invoke_without_context_reports_missing():
    async def main():
        world = await World().start()
        w = await world.worker("w")
        return await w.handle_invoke(invoke_msg("FULL"))

    reply = run(main())
    assert reply["type"] == "ERROR" and reply["code"] == "CONTEXT_MISSING"


def test_awareness_cost_ordering_and_partial_reuse():
    async def main():
        world = await World().start()
        w = await world.worker("w")
        agnostic = [await w.handle_invoke(invoke_msg("AGNOSTIC", task_id=f"a{i}")) for i in range(2)]
        w2 = await world.worker("w2")
        partial = [await w2.handle_invoke(invoke_msg("PARTIAL", task_id=f"p{i}")) for i in range(2)]
        w3 = await world.worker("w3")
        await w3.handle_install(install_msg())
        full = await w3.handle_invoke(invoke_msg("FULL"))
        return agnostic, partial, full, world.fs

    agnostic, partial, full, fs = run(main())
    infer = 100 * COST.per_inference_seconds_reference + COST.invoke_dispatch_overhead_seconds
    # agnostic pays fetch + write + load every time
    for r in agnostic:
        assert r["timings"]["total"] == pytest.approx(FS_SOLO + DISK_WRITE + LOAD + infer, rel=1e-6)
    # partial pays the fetch once, then only the load
    assert "fs_fetch" in partial[0]["timings"]
    assert "fs_fetch" not in partial[1]["timings"]
    assert partial[1]["timings"]["total"] == pytest.approx(LOAD + infer, rel=1e-6)
    assert agnostic[1]["timings"]["total"] > partial[1]["timings"]["total"] > full["timings"]["total"]
    assert fs.labels["task"] == 3


def test_fifth_concurrent_peer_request_is_busy():
    async def main():
        world = await World().start()
        holder = await world.worker("h")
        holder.preload(RECIPE)
        req = protocol.message("TRANSFER_GET", context_id=CTX)
        return await asyncio.gather(*(holder.serve_peer(req) for _ in range(5)))

    replies = run(main())
    assert [r["type"] for r in replies].count("TRANSFER_DATA") == 4
    assert [r.get("code") for r in replies].count("BUSY") == 1


def test_peer_without_blobs_says_not_found():
    async def main():
        world = await World().start()
        w = await world.worker("empty")
        return await w.serve_peer(protocol.message("TRANSFER_GET", context_id=CTX))

    assert run(main())["code"] == "NOT_FOUND"


def test_holder_killed_mid_serve_falls_back_to_fs():
    async def main():
        world = await World().start()
        holder = await world.worker("h", listen=True)
        holder.preload(RECIPE)
        newcomer = await world.worker("n")
        install = asyncio.ensure_future(newcomer.handle_install(install_msg({"peer": "h:peer"})))
        await world.clock.sleep(PEER / 2)
        holder.abort()
        return await install, world.fs

    reply, fs = run(main())
    assert reply["source"] == "fs"
    assert reply["timings"]["fs_fallback"] == 1.0
    assert fs.labels["context"] == 1
    assert reply["build_seconds"] == pytest.approx(PEER / 2 + FS_SOLO + DISK_WRITE + LOAD, rel=1e-6)


def test_peer_not_holding_falls_back_to_fs():
    async def main():
        world = await World().start()
        await world.worker("h", listen=True)
        newcomer = await world.worker("n")
        return await newcomer.handle_install(install_msg({"peer": "h:peer"}))

    assert run(main())["source"] == "fs"


def test_install_that_cannot_fit_reports_insufficient_disk():
    async def main():
        world = await World().start()
        w = await world.worker("tiny", capacity=ResourceRequest(disk_bytes=10 * GB))
        return await w.handle_install(install_msg())

    reply = run(main())
    assert reply["type"] == "ERROR" and reply["code"] == "INSUFFICIENT_DISK"


class TestBlobCache:
    def test_invocation_inputs_are_evicted_first(self):
        c = BlobCache(100)
        c.put("ctx:dependencies", 50, CacheKind.DEPENDENCIES, Source.FS, now=0)
        c.put("input:a", 30, CacheKind.INVOCATION_INPUT, Source.SCHEDULER, now=5)
        c.put("new", 40, CacheKind.MODEL_BLOB, Source.FS, now=6)
        assert "input:a" not in c and "ctx:dependencies" in c and "new" in c
        assert c.used == 90

    def test_least_recently_acquired_goes_next(self):
        c = BlobCache(100)
        c.put("old", 40, CacheKind.MODEL_BLOB, Source.FS, now=0)
        c.put("mid", 40, CacheKind.MODEL_BLOB, Source.FS, now=1)
        c.put("new", 40, CacheKind.MODEL_BLOB, Source.FS, now=2)
        assert "old" not in c and {"mid", "new"} <= set(c.entries)

    def test_protected_blobs_survive(self):
        c = BlobCache(100)
        c.put("keep", 60, CacheKind.MODEL_BLOB, Source.FS, now=0)
        with pytest.raises(InsufficientDisk):
            c.make_room(50, protect=frozenset({"keep"}))

    def test_oversize_request(self):
        with pytest.raises(InsufficientDisk):
            BlobCache(10).make_room(11)

    def test_inventory_hides_invocation_inputs_and_persists(self, tmp_path):
        c = BlobCache(100, tmp_path)
        c.put("a", 10, CacheKind.MODEL_BLOB, Source.FS, now=0)
        c.put("input:x", 10, CacheKind.INVOCATION_INPUT, Source.SCHEDULER, now=0)
        assert c.inventory() == ["a"]
        again = BlobCache(100, tmp_path)
        assert again.inventory() == ["a"] and again.used == 10


def test_sandboxes_are_private_and_reaped(tmp_path):
    a, b = Sandbox("t.0", tmp_path), Sandbox("t.1", tmp_path)
    a.write("input.json", b"a")
    assert a.path != b.path and b.listing() == []
    a.reap()
    assert not a.path.exists() and a.state == "reaped"


def test_invocations_leave_no_sandbox_behind(tmp_path):
    async def main():
        world = await World().start()
        w = await world.worker("w", cache_dir=tmp_path)
        await w.handle_install(install_msg())
        for i in range(3):
            await w.handle_invoke(invoke_msg("FULL", n=2, task_id=f"t{i}"))
        return w

    w = run(main())
    assert w.sandboxes_created == 3
    assert list((tmp_path / "sandboxes").iterdir()) == []


def test_unreachable_scheduler_exits_after_retries():
    async def main():
        world = await World().start()
        w = Worker("w", CFG.gpu(A10), CFG, world.net, "nowhere", clock=world.clock, connect_retries=3)
        try:
            await w.run()
        except WorkerExit as exc:
            return exc.code, world.clock.now()

    code, t = run(main())
    assert code == EXIT_UNREACHABLE
    assert t == pytest.approx(1 + 2 + 4)


def test_session_registers_and_obeys_shutdown():
    async def main():
        world = await World().start()
        seen = []

        async def scheduler(conn):
            seen.append(await conn.recv())
            conn.send(protocol.message("SHUTDOWN"))
            await conn.recv()

        await world.net.listen("scheduler", scheduler)
        w = await world.worker("w")
        w.preload(RECIPE)
        return await w.run(), seen

    code, seen = run(main())
    assert code == EXIT_OK
    assert seen[0]["type"] == "REGISTER" and set(seen[0]["cache_inventory"]) == set(RECIPE.blobs())


def test_lost_scheduler_is_an_error_exit():
    async def main():
        world = await World().start()

        async def scheduler(conn):
            await conn.recv()

        await world.net.listen("scheduler", scheduler)
        w = await world.worker("w")
        try:
            await w.run()
        except WorkerExit as exc:
            return exc.code

    assert run(main()) not in (None, EXIT_OK)
