import asyncio

import pytest
from hypothesis import given, settings, strategies as st

from ctxpool.core import GB
from ctxpool.fsemu import FairShareFS, FsClient, FsServer
from ctxpool.net import Clock, MemoryNetwork, run_virtual

BW = 84e9 / 8


def fs_world(max_ops=94_000, bw=BW):
    clock = Clock(1.0)
    return clock, FairShareFS(clock, bw, max_ops)


def test_single_reader_oracle():
    async def main():
        clock, fs = fs_world()
        return await fs.fetch("w0", 14.2 * GB)

    # 14.2 GB * 8 bits / 84 Gb/s
    assert run_virtual(main()) == pytest.approx(14.2 * 8 / 84, rel=1e-9)


def test_twenty_simultaneous_readers_take_twenty_times_longer():
    async def main():
        clock, fs = fs_world()
        solo = fs.solo_seconds(14.2 * GB)
        times = await asyncio.gather(*(fs.fetch(f"w{i}", 14.2 * GB) for i in range(20)))
        return solo, times, fs

    solo, times, fs = run_virtual(main())
    assert all(t == pytest.approx(20 * solo, rel=1e-9) for t in times)
    assert times[0] == pytest.approx(27.0476, abs=1e-3)
    assert fs.peak_active == 20


def test_reader_death_speeds_up_the_survivor():
    n = 10 * GB
    kill_at = 0.5

    async def main():
        clock, fs = fs_world()
        victim = asyncio.ensure_future(fs.fetch("dies", n))
        survivor = asyncio.ensure_future(fs.fetch("lives", n))
        await clock.sleep(kill_at)
        victim.cancel()
        t = await survivor
        return t, fs

    t, fs = run_virtual(main())
    # oracle: half bandwidth until the kill, then all of it
    served = kill_at * BW / 2
    expected = kill_at + (n - served) / BW
    assert t == pytest.approx(expected, rel=1e-9)
    assert t < 2 * n / BW
    assert fs.reclaimed_count == 1 and fs.completed_count == 1


def test_operation_cap_queues_fifo():
    n = GB

    async def main():
        clock, fs = fs_world(max_ops=2)
        return await asyncio.gather(*(fs.fetch(f"w{i}", n) for i in range(3)))

    a, b, c = run_virtual(main())
    assert a == pytest.approx(2 * n / BW) and b == pytest.approx(2 * n / BW)
    assert c == pytest.approx(2 * n / BW + n / BW)


def test_rejects_empty_fetch():
    async def main():
        _, fs = fs_world()
        await fs.fetch("w", 0)

    with pytest.raises(ValueError):
        run_virtual(main())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0.01, 20)), min_size=1, max_size=12))
def test_bytes_are_conserved_and_no_reader_beats_solo_time(requests):
    async def main():
        clock, fs = fs_world()

        async def one(i, start, gb):
            await clock.sleep(start)
            return await fs.fetch(f"w{i}", gb * GB)

        times = await asyncio.gather(*(one(i, s, g) for i, (s, g) in enumerate(requests)))
        return times, fs

    times, fs = run_virtual(main())
    total = sum(g * GB for _, g in requests)
    assert fs.bytes_delivered == pytest.approx(total, rel=1e-6)
    for (_, gb), t in zip(requests, times):
        assert t >= gb * GB / BW * (1 - 1e-9)
    # all the work cannot finish faster than the aggregate link allows
    last = max(s + t for (s, _), t in zip(requests, times))
    assert last >= total / BW * (1 - 1e-9)


def test_remote_fetch_and_disconnect_reclaims():
    async def main():
        clock = Clock(1.0)
        fs = FairShareFS(clock, BW)
        net = MemoryNetwork()
        await net.listen("fs", FsServer(fs).handle)
        a = FsClient(await net.connect("fs", "a"), "a")
        b_conn = await net.connect("fs", "b")
        b = FsClient(b_conn, "b")
        fa = asyncio.ensure_future(a.fetch(10 * GB, "context"))
        fb = asyncio.ensure_future(b.fetch(10 * GB, "context"))
        await clock.sleep(0.1)
        b_conn.close()
        with pytest.raises(ConnectionError):
            await fb
        ta = await fa
        return ta, fs

    ta, fs = run_virtual(main())
    assert ta < 2 * 10 * GB / BW
    assert fs.labels["context"] == 2
    assert fs.reclaimed_count == 1
