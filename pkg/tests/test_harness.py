import numpy as np
import pytest

from ctxpool.core import Awareness
from ctxpool.harness import (
    CSV_HEADER,
    ExperimentSpec,
    MetricsSeries,
    build_tasks,
    linear_fit,
    plot,
    reduction_pct,
    run_experiment,
    summarize,
    throughput_regression,
)


@pytest.mark.parametrize("items,batch,count", [(150_000, 100, 1500), (150_000, 1, 150_000), (10, 3, 4)])
def test_task_counts(items, batch, count):
    assert len(build_tasks(ExperimentSpec(total_items=items, batch_size=batch))) == count


def test_remainder_batch_and_unique_items():
    tasks = build_tasks(ExperimentSpec(total_items=10, batch_size=3))
    assert [t.batch_size for t in tasks] == [3, 3, 3, 1]
    ids = [i.item_id for t in tasks for i in t.items]
    assert len(set(ids)) == 10


def test_partial_tasks_carry_no_context_id():
    tasks = build_tasks(ExperimentSpec(total_items=5, batch_size=5, awareness=Awareness.PARTIAL))
    assert tasks[0].context_id is None and tasks[0].recipe is not None


def test_invalid_batch():
    with pytest.raises(ValueError):
        ExperimentSpec(batch_size=0)


def test_reductions_from_published_runtimes():
    s = summarize(10_400, 5_300, 2_900, labels=["agnostic", "partial", "full"])
    # (10.4 - 5.3) / 10.4 and (10.4 - 2.9) / 10.4 computed by hand
    assert s.reductions[(0, 1)] == pytest.approx(49.04, abs=0.1)
    assert s.reductions[(0, 2)] == pytest.approx(72.1, abs=0.05)


def test_identical_runs_reduce_nothing():
    assert summarize(100.0, 100.0).reductions[(0, 1)] == 0.0
    assert reduction_pct(5, 5) == 0.0


def test_batch_sweep_spread():
    s = summarize(3_300, 2_900, 3_300)
    assert s.range_seconds == pytest.approx(400)
    assert s.range_pct_of_best == pytest.approx(400 / 2_900 * 100)
    assert "runtime range" in s.format()


def test_linear_fit_perfect_line():
    r = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert r.slope == pytest.approx(2) and r.intercept == pytest.approx(1) and r.r2 == pytest.approx(1)


def test_linear_fit_degenerate():
    assert np.isnan(linear_fit([1, 1, 1], [1, 2, 3]).r2)


def test_small_run_end_to_end_and_csv_round_trip(tmp_path):
    series = run_experiment(ExperimentSpec(total_items=2000, batch_size=100))
    assert series.final_completed == 2000 and series.drained
    assert series.end_to_end > 0
    assert np.all(np.diff(series.t) >= 0) and np.all(np.diff(series.completed) >= 0)
    out = tmp_path / "m.csv"
    series.to_csv(out)
    assert out.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = MetricsSeries.from_csv(out)
    assert back.end_to_end == pytest.approx(series.end_to_end, abs=1e-5)
    assert back.final_completed == 2000
    assert list(back.connected) == list(series.connected)


def test_emulated_runs_are_deterministic():
    a = run_experiment(ExperimentSpec(total_items=3000, batch_size=50, scenario="low", seed=4))
    b = run_experiment(ExperimentSpec(total_items=3000, batch_size=50, scenario="low", seed=4))
    assert a.end_to_end == b.end_to_end
    assert np.array_equal(a.completed, b.completed)


def test_completed_at_is_a_step_function():
    s = MetricsSeries(np.array([0.0, 10.0, 20.0]), np.array([0, 5, 9]), np.zeros(3, int), np.zeros(3, int),
                      20.0, 9)
    assert list(s.completed_at([-1, 0, 5, 10, 25])) == [0, 0, 0, 5, 9]


def test_throughput_tracks_warm_workers():
    series = run_experiment(ExperimentSpec(total_items=20_000, batch_size=100, scenario="low", seed=1))
    reg = throughput_regression(series)
    assert reg.slope > 0 and reg.r2 > 0.8


def test_bad_csv_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        MetricsSeries.from_csv(p)


def test_plot_writes_svg(tmp_path):
    series = run_experiment(ExperimentSpec(total_items=500, batch_size=100))
    out = tmp_path / "fig.svg"
    plot(series, out, title="demo")
    assert out.read_text().lstrip().startswith("<?xml")
