import csv
import io

import pytest
from hypothesis import given, strategies as st

from tgsage.config import BudgetSection, DriverSection, EvaluatorSection, RunSection, SearchConfig
from tgsage.orchestrator import run_search
from tgsage.report import best_so_far, report_tables, svg_chart, write_report
from tgsage.tracker import replay_dir


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = SearchConfig(
        driver=DriverSection("random", batch_size=3),
        evaluator=EvaluatorSection(kind="surrogate", surrogate_noise=0.5),
        budget=BudgetSection(m1=15, rerank_k=3),
        run=RunSection(fsync=False),
    )
    run_search(cfg, d)
    return d


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@given(st.lists(st.one_of(st.none(), st.floats(-5, 5)), max_size=40))
def test_best_so_far_monotone(scores):
    curve = best_so_far(scores)
    assert len(curve) == len(scores)
    seen = [c for c in curve if c is not None]
    assert seen == sorted(seen)
    for k, c in enumerate(curve):
        prefix = [s for s in scores[: k + 1] if s is not None]
        assert c == (max(prefix) if prefix else None)


def test_progress_table(run_dir):
    t = report_tables(replay_dir(run_dir))
    prog = rows(t["best_so_far.csv"])
    assert len(prog) == 15
    best = [float(r["best_so_far"]) for r in prog]
    assert best == sorted(best)
    assert best[-1] == max(float(r["score"]) for r in prog)


def test_cost_totals_match_counters(run_dir):
    state = replay_dir(run_dir)
    cost = rows(report_tables(state)["cost_curve.csv"])
    assert len(cost) == 18
    assert int(cost[-1]["cumulative_examples"]) == state.counters.e1 + state.counters.e2 == 15 * 640 + 3 * 5120
    cum = [int(r["cumulative_examples"]) for r in cost]
    assert cum == sorted(cum)


def test_top5(run_dir):
    top = rows(report_tables(replay_dir(run_dir))["top5.csv"])
    assert [r["rank"] for r in top] == ["1", "2", "3", "4", "5"]
    scores = [float(r["combined"]) for r in top]
    assert scores == sorted(scores, reverse=True)
    assert all(r["mature"] for r in top[:3]) and not any(r["mature"] for r in top[3:])


def test_regeneration_is_byte_identical(run_dir):
    first = {p.name: p.read_bytes() for p in write_report(run_dir)}
    second = {p.name: p.read_bytes() for p in write_report(run_dir)}
    assert first == second and len(first) == 4


def test_svg_wellformed():
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg_chart([None, 0.2, 0.5, 0.5], "x", "y"))
    assert root.tag.endswith("svg")
    assert ET.fromstring(svg_chart([], "x", "y")) is not None
    assert "polyline" in svg_chart([0.3, 0.3], "x", "y")
