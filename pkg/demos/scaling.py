"""Throughput follows the number of warm workers.

The high-capacity trace adds workers in bursts up to 186 of them.  Every
minute of the run becomes one point (average warm workers, items per
second).  A straight line through those points shows that each new worker
adds about the same throughput once its context is built.  The
low-capacity trace grows slowly from 4 to 20 workers and still finishes.

Run:  python demos/scaling.py [--items N]
"""

from _common import parser

from ctxpool import ExperimentSpec, run_experiment
from ctxpool.harness import throughput_regression, throughput_windows


def main():
    args = parser(__doc__.splitlines()[0]).parse_args()
    high = run_experiment(ExperimentSpec(total_items=args.items, scenario="high"))
    reg = throughput_regression(high)
    x, y = throughput_windows(high, until=high.report.last_dispatch_at)
    print(f"high capacity: peak {high.connected.max()} workers, done in {high.end_to_end:.0f} s")
    for workers, rate in zip(x, y):
        print(f"   {workers:6.1f} warm workers -> {rate:6.1f} items/s")
    print(f"   fit: {reg.slope:.2f} items/s per warm worker, R^2 = {reg.r2:.3f}")
    low = run_experiment(ExperimentSpec(total_items=args.items, scenario="low"))
    print(f"low capacity: {low.final_completed} items, drained={low.drained}, {low.end_to_end:.0f} s")


if __name__ == "__main__":
    main()
