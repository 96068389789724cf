"""Newcomers copy the context from each other instead of the filesystem.

One worker starts with the context already cached and 49 more join a
second later.  With peer transfer on, each holder serves at most four
copies at once, and every finished copy becomes a new holder, so the
context spreads 1 -> 5 -> 25 -> ... without touching the shared
filesystem.  With it off, all 49 newcomers hit the filesystem together.

Run:  python demos/peer_transfer.py
"""

from collections import Counter
from dataclasses import replace

from _common import parser

from ctxpool import Config, ExperimentSpec, run_experiment
from ctxpool.core import A10, TITAN_X_PASCAL
from ctxpool.factory import TraceEvent


def run(peer_transfer, items):
    trace = [TraceEvent(0, "ARRIVE", A10, preload=True)]
    trace += [TraceEvent(1, "ARRIVE", A10 if i % 2 else TITAN_X_PASCAL) for i in range(49)]
    cfg = replace(Config(), peer_transfer=peer_transfer)
    return run_experiment(ExperimentSpec(total_items=items, trace=trace, config=cfg))


def main():
    p = parser(__doc__.splitlines()[0])
    p.set_defaults(items=50_000)
    args = p.parse_args()
    for enabled in (True, False):
        s = run(enabled, args.items)
        installs = s.report.installs
        sources = Counter(i.actual_source for i in installs)
        ready = sorted(i.ready_at for i in installs)
        print(f"peer transfer {'on ' if enabled else 'off'}: filesystem context fetches "
              f"{s.fs_fetches.get('context', 0):>2}, installs by source {dict(sources)}, "
              f"total build time {sum(i.build_seconds for i in installs):7.0f} s, "
              f"last context ready at {ready[-1]:.0f} s")


if __name__ == "__main__":
    main()
