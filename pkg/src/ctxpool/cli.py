"""Single entry point multiplexing every process role and the analysis tools.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 runtime error,
5 deadlock or depleted pool.  A worker that never reaches its scheduler
exits 6.
"""

from __future__ import annotations

import argparse
import asyncio
import configparser
import logging
import os
import signal
import sys
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .core import Awareness, Config, ResourceRequest, default_recipe, load_config, GB
from .factory import Factory, ProcessPool, Scenario, dump_trace, generate_trace, load_trace, validate_trace
from .fsemu import FairShareFS, FsServer
from .net import Clock, StalledLoopError, TcpNetwork
from .scheduler import PoolDepleted, Scheduler, jsonl_sink
from .worker import Worker, WorkerExit

log = logging.getLogger("ctxpool")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4
EXIT_DEADLOCK = 5


class ConfigError(Exception):
    pass


@dataclass
class GlobalConfig:
    config_path: Optional[Path] = None
    time_scale: Optional[float] = None
    verbosity: int = 0
    workdir: Path = Path(".")
    ports: dict = field(default_factory=dict)  # role -> port, 0 meaning "any free port"

    def check(self) -> None:
        fixed = [p for p in self.ports.values() if p]
        if len(fixed) != len(set(fixed)):
            raise ConfigError(f"port assignments must be distinct: {self.ports}")
        for role, port in self.ports.items():
            if not 0 <= port <= 65535:
                raise ConfigError(f"{role} port {port} out of range")
        if self.time_scale is not None and self.time_scale <= 0:
            raise ConfigError("--time-scale must be positive")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def load(self) -> Config:
        try:
            cfg = load_config(self.config_path)
        except (OSError, ValueError, TypeError, configparser.Error) as exc:
            raise ConfigError(f"cannot load config {self.config_path}: {exc}") from exc
        if self.time_scale is not None:
            cfg = replace(cfg, cost=replace(cfg.cost, time_scale=self.time_scale))
        return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Accepted both before and after the subcommand; the copies attached to
    # subparsers default to SUPPRESS so they never clobber an earlier value.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="INI config file (see ctxpool.ini)")
    parser.add_argument("--time-scale", type=float, default=d(None),
                        help="wall seconds per emulated second (overrides config and CTXPOOL_TIME_SCALE)")
    parser.add_argument("--workdir", default=d("."), help="base directory for relative paths")
    parser.add_argument("-v", "--verbose", action="count", default=d(0), help="more logging")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxpool", description="Context-aware task engine and opportunistic pool emulator.")
    _global_options(p, suppress=False)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    common = _Parser(add_help=False)
    _global_options(common, suppress=True)

    s = sub.add_parser("scheduler", parents=[common], help="run the manager on a TCP port",
                       description="Accept workers over TCP, run a workload to completion, write metrics.")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=9123)
    s.add_argument("--items", type=int, default=harness.DESK_SCALE_ITEMS)
    s.add_argument("--batch-size", type=int, default=100)
    s.add_argument("--awareness", type=_awareness, default=Awareness.FULL)
    s.add_argument("--out", default="metrics.csv", help="metrics CSV path")
    s.add_argument("--events", default=None, help="JSON-lines event log path")
    s.add_argument("--idle-grace", type=float, default=5000.0,
                   help="emulated seconds with zero workers before giving up")
    s.set_defaults(func=cmd_scheduler)

    w = sub.add_parser("worker", parents=[common], help="run one worker process",
                       description="Connect to a scheduler, install contexts and execute tasks.")
    w.add_argument("--scheduler", required=True, help="scheduler host:port")
    w.add_argument("--fs", default=None, help="filesystem emulator host:port")
    w.add_argument("--gpu", required=True, help="GPU model name from the catalog")
    w.add_argument("--worker-id", default=None, help="default: derived from host and pid")
    w.add_argument("--peer-host", default="127.0.0.1")
    w.add_argument("--peer-port", type=int, default=0, help="peer-transfer listen port (0 picks one)")
    w.add_argument("--cache-dir", default=None, help="persistent blob cache (survives restarts)")
    w.add_argument("--cores", type=int, default=None)
    w.add_argument("--memory-gb", type=float, default=None)
    w.add_argument("--disk-gb", type=float, default=None)
    w.add_argument("--preload", action="store_true", help="seed the cache with the default context's blobs")
    w.add_argument("--connect-retries", type=int, default=5)
    w.set_defaults(func=cmd_worker)

    f = sub.add_parser("factory", parents=[common], help="host the FS emulator and replay a pool trace",
                       description="Spawn and kill worker processes following a trace.")
    _factory_options(f)
    src = f.add_mutually_exclusive_group()
    src.add_argument("--trace", default=None, help="trace file (JSON lines)")
    src.add_argument("--scenario", type=_scenario, default=Scenario.STATIC_20)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_factory)

    t = sub.add_parser("trace", parents=[common], help="generate, inspect or replay traces",
                       description="Seeded pool arrival/preemption traces.")
    tsub = t.add_subparsers(dest="trace_command", metavar="ACTION", parser_class=_Parser)
    tsub.required = True
    g = tsub.add_parser("generate", parents=[common], help="write a scenario trace")
    g.add_argument("scenario", type=_scenario)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="output file (default stdout)")
    g.set_defaults(func=cmd_trace_generate)
    i = tsub.add_parser("inspect", parents=[common], help="summarize a trace file")
    i.add_argument("file")
    i.set_defaults(func=cmd_trace_inspect)
    r = tsub.add_parser("replay", parents=[common], help="replay a trace against a scheduler")
    r.add_argument("file")
    _factory_options(r)
    r.set_defaults(func=cmd_factory, seed=0)

    run = sub.add_parser("run", parents=[common], help="run one experiment end to end",
                         description="Scheduler, FS emulator and pool in one command.")
    run.add_argument("--scenario", type=_scenario, default=Scenario.STATIC_20,
                     help="static20, preempt-1pm, high or low (default static20)")
    run.add_argument("--awareness", type=_awareness, default=Awareness.FULL, help="agnostic, partial or full")
    run.add_argument("--batch-size", type=int, default=100, help="items per task")
    run.add_argument("--items", type=int, default=harness.DESK_SCALE_ITEMS,
                     help=f"total inference items (default {harness.DESK_SCALE_ITEMS})")
    run.add_argument("--seed", type=int, default=0, help="trace seed")
    run.add_argument("--trace", default=None, help="replay this trace instead of the scenario")
    run.add_argument("--out", default="metrics.csv", help="metrics CSV path")
    run.add_argument("--events", default=None, help="JSON-lines event log path")
    run.add_argument("--mode", choices=["emulated", "live"], default="emulated",
                     help="virtual clock in-process, or TCP with worker processes")
    run.add_argument("--allow-depletion", action="store_true",
                     help="treat an emptied pool as the end of the run instead of an error")
    run.set_defaults(func=cmd_run)

    sm = sub.add_parser("summarize", parents=[common], help="compare metrics CSVs")
    sm.add_argument("files", nargs="+")
    sm.add_argument("--window", type=float, default=60.0, help="throughput window (emulated s)")
    sm.set_defaults(func=cmd_summarize)

    pl = sub.add_parser("plot", parents=[common], help="chart completed inferences over time")
    pl.add_argument("file")
    pl.add_argument("--out", required=True)
    pl.add_argument("--title", default="")
    pl.set_defaults(func=cmd_plot)
    return p


def _factory_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheduler", required=True, help="scheduler host:port")
    p.add_argument("--fs-host", default="127.0.0.1")
    p.add_argument("--fs-port", type=int, default=9124)
    p.add_argument("--cache-root", default=None, help="parent directory of per-worker caches")


def _awareness(value: str) -> Awareness:
    try:
        return Awareness(value.strip().upper())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected one of {[a.value.lower() for a in Awareness]}") from None


def _scenario(value: str) -> Scenario:
    try:
        return Scenario.parse(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _port_of(address: str) -> int:
    return int(address.rpartition(":")[2])


def _globals(args, ports: Optional[dict] = None) -> GlobalConfig:
    workdir = Path(args.workdir)
    g = GlobalConfig(
        config_path=(workdir / args.config).resolve() if args.config else None,
        time_scale=args.time_scale,
        verbosity=args.verbose,
        workdir=workdir,
        ports=ports or {},
    )
    g.check()
    return g


# -- subcommands ----------------------------------------------------------------


def cmd_scheduler(args) -> int:
    g = _globals(args, {"scheduler": args.port})
    cfg = g.load()
    spec = harness.ExperimentSpec(total_items=args.items, batch_size=args.batch_size, awareness=args.awareness,
                                  config=cfg)
    sink = jsonl_sink(g.path(args.events)) if args.events else None
    return asyncio.run(_scheduler_main(args, g, cfg, spec, sink))


async def _scheduler_main(args, g: GlobalConfig, cfg: Config, spec, sink) -> int:
    clock = Clock(cfg.cost.time_scale, quantum=1e-6)
    scheduler = Scheduler(cfg, clock, event_log=sink)
    recipe = default_recipe()
    scheduler.register_recipe(recipe)
    for task in harness.build_tasks(spec, recipe):
        scheduler.submit(task)
    listener = await TcpNetwork().listen(f"{args.host}:{args.port}", scheduler.handle_connection)
    log.info("scheduler listening on %s", listener.address)
    print(f"listening {listener.address}", flush=True)
    code = EXIT_OK
    try:
        report = await scheduler.run_until_drained(idle_grace=args.idle_grace)
    except PoolDepleted as exc:
        log.error("%s", exc)
        report, code = exc.report, EXIT_DEADLOCK
    scheduler.shutdown_workers()
    await asyncio.sleep(0.05)
    listener.close()
    harness.MetricsSeries.from_report(report).to_csv(g.path(args.out))
    print(f"end_to_end {report.end_to_end:.1f} completed {report.completed_items}/{report.submitted_items}")
    return code


def cmd_worker(args) -> int:
    g = _globals(args, {"peer": args.peer_port})
    cfg = g.load()
    try:
        gpu = cfg.gpu(args.gpu)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cap = cfg.worker_capacity
    cap = ResourceRequest(
        cores=args.cores if args.cores is not None else cap.cores,
        memory_bytes=int(args.memory_gb * GB) if args.memory_gb is not None else cap.memory_bytes,
        disk_bytes=int(args.disk_gb * GB) if args.disk_gb is not None else cap.disk_bytes,
        gpus=cap.gpus,
    )
    worker_id = args.worker_id or f"{os.uname().nodename}-{os.getpid()}"
    cache_dir = g.path(args.cache_dir) if args.cache_dir else None

    async def main() -> int:
        worker = Worker(worker_id, gpu, cfg, TcpNetwork(), args.scheduler, fs_address=args.fs,
                        peer_address=f"{args.peer_host}:{args.peer_port}", cache_dir=cache_dir, capacity=cap,
                        clock=Clock(cfg.cost.time_scale, quantum=1e-6), connect_retries=args.connect_retries)
        if args.preload:
            worker.preload(default_recipe())
        return await worker.run()

    try:
        return asyncio.run(main())
    except WorkerExit as exc:
        log.error("worker %s: %s", worker_id, exc)
        return exc.code


def cmd_factory(args) -> int:
    g = _globals(args, {"fs": args.fs_port, "scheduler": _port_of(args.scheduler)})
    cfg = g.load()
    trace_file = getattr(args, "file", None) or getattr(args, "trace", None)
    if trace_file:
        trace = _read_trace(g.path(trace_file), cfg)
    else:
        trace = generate_trace(args.scenario, args.seed, cfg.catalog)
    return asyncio.run(_factory_main(args, g, cfg, trace))


async def _factory_main(args, g: GlobalConfig, cfg: Config, trace) -> int:
    clock = Clock(cfg.cost.time_scale, quantum=1e-6)
    fs = FairShareFS(clock, cfg.cost.fs_aggregate_bandwidth, cfg.cost.fs_max_concurrent_ops)
    listener = await TcpNetwork().listen(f"{args.fs_host}:{args.fs_port}", FsServer(fs).handle)
    print(f"fs listening {listener.address}", flush=True)
    cache_root = str(g.path(args.cache_root).resolve()) if args.cache_root else None
    pool = ProcessPool(args.scheduler, listener.address, config_path=str(g.config_path) if g.config_path else None,
                       time_scale=cfg.cost.time_scale, workdir=cache_root)
    factory = Factory(pool, clock, trace)
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    try:
        replay = asyncio.ensure_future(factory.run())
        stopper = asyncio.ensure_future(stop.wait())
        await asyncio.wait({replay, stopper}, return_when=asyncio.FIRST_COMPLETED)
        if replay.done():
            replay.result()
            # trace over: stay up (serving the FS) until every worker has exited
            while not stop.is_set() and any(p.poll() is None for p in pool.procs.values()):
                await asyncio.sleep(0.1)
        replay.cancel()
        stopper.cancel()
    finally:
        await pool.close()
        listener.close()
    for t, kind, wid, gpu in factory.log:
        log.info("%.1f %s %s %s", t, kind, wid, gpu)
    print(f"factory done: {len(factory.log)} pool events, {fs.completed_count} FS fetches")
    return EXIT_OK


def _read_trace(path: Path, cfg: Config):
    try:
        trace = load_trace(path.read_text())
        validate_trace(trace, cfg.catalog)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad trace {path}: {exc}") from exc
    return trace


def cmd_trace_generate(args) -> int:
    g = _globals(args)
    cfg = g.load()
    text = dump_trace(generate_trace(args.scenario, args.seed, cfg.catalog))
    if args.out:
        g.path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def trace_stats(trace) -> dict:
    alive, peak = 0, 0
    for e in trace:
        if e.kind == "ARRIVE":
            alive += 1
            peak = max(peak, alive)
        elif alive:
            alive -= 1
    return {
        "events": len(trace),
        "arrivals": sum(e.kind == "ARRIVE" for e in trace),
        "preemptions": sum(e.kind == "PREEMPT" for e in trace),
        "peak_population": peak,
        "final_population": alive,
        "span_seconds": trace[-1].at if trace else 0.0,
        "by_gpu": dict(sorted(Counter(e.gpu_model for e in trace if e.kind == "ARRIVE").items())),
    }


def cmd_trace_inspect(args) -> int:
    g = _globals(args)
    stats = trace_stats(_read_trace(g.path(args.file), g.load()))
    for key, value in stats.items():
        if key == "by_gpu":
            for name, n in value.items():
                print(f"  {name}: {n}")
        else:
            print(f"{key}: {value}")
    return EXIT_OK


def cmd_run(args) -> int:
    g = _globals(args)
    cfg = g.load()
    trace = _read_trace(g.path(args.trace), cfg) if args.trace else None
    sink = jsonl_sink(g.path(args.events)) if args.events else None
    spec = harness.ExperimentSpec(total_items=args.items, batch_size=args.batch_size, awareness=args.awareness,
                                  scenario=args.scenario, seed=args.seed, config=cfg, trace=trace,
                                  allow_depletion=args.allow_depletion, event_log=sink)
    kwargs = {}
    if args.mode == "live":
        kwargs = {"workdir": str(g.path("workers").resolve()),
                  "config_path": str(g.config_path) if g.config_path else None}
        Path(kwargs["workdir"]).mkdir(parents=True, exist_ok=True)
    try:
        series = harness.run_experiment(spec, mode=args.mode, **kwargs)
    except PoolDepleted as exc:
        harness.MetricsSeries.from_report(exc.report).to_csv(g.path(args.out))
        print(exc, file=sys.stderr)
        return EXIT_DEADLOCK
    series.to_csv(g.path(args.out))
    print(f"{args.scenario.value} {args.awareness.value} B={args.batch_size}: end_to_end {series.end_to_end:.1f} s, "
          f"{series.final_completed}/{series.total_items} items, wrote {g.path(args.out)}")
    return EXIT_OK


def _read_series(g: GlobalConfig, name: str) -> harness.MetricsSeries:
    try:
        return harness.MetricsSeries.from_csv(g.path(name))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read metrics {name}: {exc}") from exc


def cmd_summarize(args) -> int:
    g = _globals(args)
    series = [_read_series(g, f) for f in args.files]
    print(harness.summarize(*series, window=args.window).format())
    return EXIT_OK


def cmd_plot(args) -> int:
    g = _globals(args)
    harness.plot(_read_series(g, args.file), g.path(args.out), title=args.title)
    return EXIT_OK


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ctxpool: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PoolDepleted, StalledLoopError) as exc:
        print(f"ctxpool: deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # top-level guard: report and map to the runtime exit code
        log.debug("unhandled", exc_info=True)
        print(f"ctxpool: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())
