"""Batch size matters a lot without a resident context and barely with one.

Each task pays its startup cost once.  With PARTIAL awareness that cost is
a full model load, so tiny batches multiply it; with FULL awareness the
model stays loaded and only the per-task dispatch overhead is left.

Run:  python demos/batch_size.py [--items N]
Note: PARTIAL with batch size 1 at full scale takes two to three minutes.
"""

from _common import parser

from ctxpool import ExperimentSpec, run_experiment
from ctxpool.core import Awareness

SIZES = (1, 10, 100, 1000)


def main():
    args = parser(__doc__.splitlines()[0]).parse_args()
    print(f"{'batch':>6} {'PARTIAL (s)':>14} {'FULL (s)':>10}")
    table = {}
    for b in SIZES:
        row = [run_experiment(ExperimentSpec(total_items=args.items, batch_size=b, awareness=aw)).end_to_end
               for aw in (Awareness.PARTIAL, Awareness.FULL)]
        table[b] = row
        print(f"{b:>6} {row[0]:>14.1f} {row[1]:>10.1f}")
    partial = [r[0] for r in table.values()]
    full = [r[1] for r in table.values()]
    print(f"\nPARTIAL worst/best: {max(partial) / min(partial):.1f}x")
    print(f"FULL worst/best:    {max(full) / min(full):.2f}x")


if __name__ == "__main__":
    main()
