"""Losing workers hurts less when warm ones are worth keeping.

The preempt-1pm trace starts with 20 workers and takes one away every
minute from t=900 s until none are left.  Preempted tasks go back on the
queue.  The run stops when the pool is empty, so the comparison is how
many items each version finished before that.

Run:  python demos/preemption.py [--items N]
"""

import numpy as np
from _common import parser

from ctxpool import ExperimentSpec, run_experiment
from ctxpool.core import Awareness


def main():
    args = parser(__doc__.splitlines()[0]).parse_args()
    runs = {}
    for aw in (Awareness.PARTIAL, Awareness.FULL):
        spec = ExperimentSpec(total_items=args.items, batch_size=100, awareness=aw,
                              scenario="preempt-1pm", allow_depletion=True)
        runs[aw] = run_experiment(spec)
    for aw, s in runs.items():
        ending = "finished" if s.drained else "pool ran out"
        print(f"{aw.value:>8}: {s.final_completed:>7} items by {s.t[-1]:.0f} s ({ending})")
    full, partial = runs[Awareness.FULL], runs[Awareness.PARTIAL]
    checkpoints = np.arange(300, min(full.t[-1], partial.t[-1]), 300)
    print("\n  t (s)   PARTIAL      FULL")
    for t, p, f in zip(checkpoints, partial.completed_at(checkpoints), full.completed_at(checkpoints)):
        print(f"{t:7.0f} {p:9d} {f:9d}")
    if args.plot:
        from ctxpool.harness import plot
        plot(full, args.plot, title="FULL context under preemption")


if __name__ == "__main__":
    main()
