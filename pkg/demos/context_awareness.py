"""How much does keeping the model resident on workers save?

Three versions of the same workload run on a static pool of 10 A10s and
10 TITAN X cards:

* AGNOSTIC tasks pull the model and its dependencies from the shared
  filesystem and load it onto the GPU every time.
* PARTIAL tasks find the blobs in the worker's disk cache after the first
  fetch but still load the model for every task.
* FULL tasks run inside a long-lived context, so the load happens once per
  worker.

Run:  python demos/context_awareness.py [--items N]
"""

from _common import parser

from ctxpool import ExperimentSpec, run_experiment, summarize
from ctxpool.core import Awareness


def main():
    args = parser(__doc__.splitlines()[0]).parse_args()
    runs = []
    for awareness in (Awareness.AGNOSTIC, Awareness.PARTIAL, Awareness.FULL):
        series = run_experiment(ExperimentSpec(total_items=args.items, batch_size=100, awareness=awareness))
        series.label = awareness.value.lower()
        print(f"{series.label:>9}: {series.end_to_end:9.1f} emulated s")
        runs.append(series)
    print()
    print(summarize(*runs).format())
    agnostic, partial, full = runs
    print(f"\nAGNOSTIC/FULL = {agnostic.end_to_end / full.end_to_end:.2f}, "
          f"PARTIAL/FULL = {partial.end_to_end / full.end_to_end:.2f}")
    if args.plot:
        from ctxpool.harness import plot
        plot(full, args.plot, title="FULL context, static pool")


if __name__ == "__main__":
    main()
