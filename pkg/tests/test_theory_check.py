import itertools
import json

import numpy as np
import pytest

from app.errors import PreconditionError, UndefinedBoundError
from app.services.graph_core import from_edges
from app.services.theory_check import (
    BOUND_RATES,
    GRAPH_DEGREE,
    MEASURED_RATES,
    REPORT_HEADER,
    CoverageInstance,
    CoverageTrace,
    Counterexample,
    SweepReport,
    check_theorem1,
    connected_graphs,
    prop2_first_order,
    prop2_rhs,
    prop3_second_order,
    random_connected_graph,
    replay_trace,
    theorem1_bound,
    theorem1_exhaustive,
    theorem4_threshold,
    trace_sweep,
    write_report,
)

K5_EDGES = [(i, j) for i in range(5) for j in range(i + 1, 5)]
# triangle 0-1-2 with one pendant per corner
PENDANT_TRIANGLE = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 4), (2, 5)]


def test_k4_single_node_bound_is_tight(k4_graph):
    inst = CoverageInstance(k4_graph, np.ones(4), frozenset({0}))
    assert inst.beta == 0.75
    assert theorem1_bound(inst) == pytest.approx(0.75)
    assert check_theorem1(inst).holds


def test_star_with_leaf_violates(star_graph):
    inst = CoverageInstance(star_graph, np.ones(5), frozenset({0, 1}))
    lhs, rhs, holds = check_theorem1(inst)
    assert lhs == 1.0
    assert rhs == pytest.approx(0.4)
    assert not holds


def test_isolated_cover_node_is_undefined():
    g = from_edges(3, [(0, 1)])
    with pytest.raises(UndefinedBoundError):
        theorem1_bound(CoverageInstance(g, np.ones(3), frozenset({2})))


def test_instance_validation(k4_graph):
    with pytest.raises(PreconditionError):
        CoverageInstance(k4_graph, np.ones(4), frozenset())
    with pytest.raises(PreconditionError):
        CoverageInstance(k4_graph, np.array([1.0, 0.0, 1.0, 1.0]), frozenset({0}))
    with pytest.raises(PreconditionError):
        CoverageInstance(k4_graph, np.ones(4), frozenset({0}), degree_mode="weighted")


def test_covered_set_matches_adjacency_rows():
    rng = np.random.default_rng(0)
    for _ in range(30):
        g = random_connected_graph(rng, 4, 9)
        size = int(rng.integers(1, g.node_count + 1))
        cover = frozenset(int(v) for v in rng.choice(g.node_count, size=size, replace=False))
        inst = CoverageInstance(g, rng.uniform(0.1, 1.0, g.node_count), cover)
        assert inst.covered == inst.covered_by_adjacency()


def test_bound_is_scale_free(star_graph):
    weights = np.array([0.3, 0.9, 0.2, 0.5, 0.7])
    inst = CoverageInstance(star_graph, weights, frozenset({1}))
    assert theorem1_bound(inst) == pytest.approx(theorem1_bound(inst.rescaled(7.5)))


def test_connected_graph_counts():
    counts = {}
    for g in connected_graphs(4):
        counts[g.node_count] = counts.get(g.node_count, 0) + 1
    assert counts == {2: 1, 3: 2, 4: 6}


def test_exhaustive_sweep_agrees_with_scalar_checks():
    report = theorem1_exhaustive(max_n=4, weight_draws=3, seed=1)
    assert report.instances_checked == (3 * 1 + 7 * 2 + 15 * 6) * 3

    rng = np.random.default_rng(1)
    violations = 0
    for g in connected_graphs(4):
        draws = rng.uniform(0.1, 1.0, size=(3, g.node_count))
        for size in range(1, g.node_count + 1):
            for cover in itertools.combinations(range(g.node_count), size):
                for w in draws:
                    violations += not check_theorem1(CoverageInstance(g, w, frozenset(cover), GRAPH_DEGREE)).holds
    assert report.violations == violations
    assert len(report.counterexamples) == min(violations, 20)


def test_first_order_statement_on_k4(k4_graph):
    trace = CoverageTrace.from_sets(k4_graph, np.ones(4), [{0}, {0, 1}], rates=MEASURED_RATES)
    assert trace.weight_drop == 1.0
    lhs, rhs, holds = prop2_first_order(trace)
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(1.0)
    assert holds


def test_first_order_needs_rising_degree(k4_graph):
    split = from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(PreconditionError):
        prop2_rhs(CoverageTrace.from_sets(split, np.ones(4), [{0}, {0, 2}]))

    saturated = CoverageTrace.from_sets(k4_graph, np.ones(4), [{0, 1}, {0, 1, 2}], rates=MEASURED_RATES)
    lhs, rhs, holds = prop2_first_order(saturated)
    assert (lhs, rhs) == (0.0, 0.0)
    assert holds


def test_trace_must_be_nested(k4_graph):
    with pytest.raises(PreconditionError):
        CoverageTrace.from_sets(k4_graph, np.ones(4), [{0, 1}, {1, 2}])
    with pytest.raises(PreconditionError):
        CoverageTrace.from_sets(k4_graph, np.ones(4), [{0}])


def test_second_order_and_threshold_on_k5():
    g = from_edges(5, K5_EDGES)
    trace = CoverageTrace.from_sets(g, np.ones(5), [{0}, {0, 1}, {0, 1, 2}], rates=MEASURED_RATES)
    lhs, rhs, holds = prop3_second_order(trace)
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(1.0)
    assert holds
    threshold, implied = theorem4_threshold(trace)
    assert threshold == pytest.approx(2.0)
    assert implied


def test_second_order_rejects_weight_floor():
    g = from_edges(5, K5_EDGES)
    trace = CoverageTrace.from_sets(g, np.ones(5), [{0}, {0, 1}, {0, 1, 2}], w_d=5.0)
    with pytest.raises(PreconditionError):
        prop3_second_order(trace)


def test_trace_sweep_reports_every_statement():
    reports = trace_sweep(count=10, seed=0, max_n=8, max_attempts=3000)
    assert set(reports) == {"prop2", "prop3", "theorem4"}
    assert reports["prop2"].instances_checked + reports["prop2"].rejected > 0
    for report in reports.values():
        assert report.instances_checked <= 10 or report.statement == "theorem4"
        assert report.violations <= report.instances_checked
        assert report.tightest_ratio >= 0.0


def test_write_report_dumps_counterexamples(tmp_path, star_graph):
    report = SweepReport("theorem1")
    inst = CoverageInstance(star_graph, np.ones(5), frozenset({0, 1}))
    lhs, rhs, holds = check_theorem1(inst)
    report.record(lhs, rhs, holds, lambda: Counterexample(
        statement="theorem1", node_count=5, edges=star_graph.edges(), weights=[1.0] * 5,
        cover_sets=[[0, 1]], degree_mode=GRAPH_DEGREE, quantities={"beta": lhs, "bound": rhs},
    ))
    path = write_report([report], tmp_path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[1] == "theorem1,1,1,2.500000"
    dump = json.loads((tmp_path / "counterexample_theorem1_000.json").read_text(encoding="utf-8"))
    assert dump["cover_sets"] == [[0, 1]]


def test_first_order_under_both_rate_readings():
    g = from_edges(4, [(0, 1), (0, 2), (1, 3)])
    weights = np.array([1.0, 1.0, 1.0, 5.0])

    measured = CoverageTrace.from_sets(g, weights, [{0}, {0, 1}], rates=MEASURED_RATES)
    lhs, rhs, holds = prop2_first_order(measured)
    assert lhs == pytest.approx(6.0)
    assert rhs == pytest.approx(4.0)
    assert not holds

    bounded = CoverageTrace.from_sets(g, weights, [{0}, {0, 1}], rates=BOUND_RATES)
    assert bounded.lower_rate(bounded.previous) == 0.0
    assert bounded.upper_rate(bounded.current) == pytest.approx(1.0)
    lhs, rhs, holds = prop2_first_order(bounded)
    assert lhs == pytest.approx(6.0)
    assert rhs == pytest.approx(8.0)
    assert holds


def test_second_order_fails_under_bound_rates():
    g = from_edges(6, PENDANT_TRIANGLE)
    trace = CoverageTrace.from_sets(g, np.ones(6), [{0}, {0, 1}, {0, 1, 2}], w_d=0.0)
    assert (trace.weight_drop, trace.next_weight_drop) == (2.0, 1.0)
    assert trace.next_delta_beta == pytest.approx(2 / 3)
    lhs, rhs, holds = prop3_second_order(trace)
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(4.0)
    assert not holds
    threshold, implied = theorem4_threshold(trace)
    assert threshold == pytest.approx(90.0)
    assert implied


def test_second_order_fails_under_measured_rates():
    g = from_edges(6, PENDANT_TRIANGLE)
    unit = CoverageTrace.from_sets(g, np.ones(6), [{0}, {0, 1}, {0, 1, 2}], w_d=0.0, rates=MEASURED_RATES)
    lhs, rhs, holds = prop3_second_order(unit)
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(1.0)
    assert holds

    # equal weight drops make the left side vanish
    weights = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 2.0])
    even = CoverageTrace.from_sets(g, weights, [{0}, {0, 1}, {0, 1, 2}], w_d=0.0, rates=MEASURED_RATES)
    lhs, rhs, holds = prop3_second_order(even)
    assert lhs == pytest.approx(0.0)
    assert rhs == pytest.approx(7 / 6)
    assert not holds


def test_bound_rates_reject_oversized_degree_rate():
    g = from_edges(5, K5_EDGES)
    trace = CoverageTrace.from_sets(g, np.ones(5), [{0}, {0, 1}, {0, 1, 2}])
    assert trace.rates == BOUND_RATES
    with pytest.raises(PreconditionError):
        prop3_second_order(trace)
    with pytest.raises(PreconditionError):
        CoverageTrace.from_sets(g, np.ones(5), [{0}, {0, 1}], rates="guessed")


def test_threshold_scales_with_weights():
    g = from_edges(6, PENDANT_TRIANGLE)
    weights = np.array([0.4, 0.9, 0.3, 0.7, 0.5, 0.8])
    sets = [{0}, {0, 1}, {0, 1, 2}]
    base = CoverageTrace.from_sets(g, weights, sets)
    base.w_d = 0.5 * base.weight_drop
    scaled = CoverageTrace.from_sets(g, weights * 2.0, sets, w_d=2.0 * base.w_d)
    threshold, implied = theorem4_threshold(base)
    scaled_threshold, scaled_implied = theorem4_threshold(scaled)
    assert scaled_threshold == pytest.approx(2.0 * threshold)
    assert scaled_implied == implied
    assert prop3_second_order(scaled).holds == prop3_second_order(base).holds


def test_first_order_never_fails_under_bound_rates():
    reports = trace_sweep(count=40, seed=3, max_attempts=20000)
    assert reports["prop2"].instances_checked == 40
    assert reports["prop2"].violations == 0


@pytest.mark.slow
def test_exhaustive_sweep_at_full_scale():
    report = theorem1_exhaustive()
    assert report.instances_checked == 5_807_250
    assert report.violations == 1_666_960
    assert len(report.counterexamples) == 20


@pytest.mark.slow
def test_trace_sweep_at_full_scale_with_bound_rates():
    reports = trace_sweep(count=500, seed=0)
    assert reports["prop2"].instances_checked == 500
    assert reports["prop3"].instances_checked == 500
    assert reports["prop2"].violations == 0
    for example in reports["prop3"].counterexamples:
        assert example.rates == BOUND_RATES
        assert not prop3_second_order(replay_trace(example)).holds


@pytest.mark.slow
def test_trace_sweep_at_full_scale_with_measured_rates():
    reports = trace_sweep(count=500, seed=0, rates=MEASURED_RATES)
    assert (reports["prop2"].instances_checked, reports["prop2"].violations) == (500, 88)
    assert (reports["prop3"].instances_checked, reports["prop3"].violations) == (500, 98)
    for example in reports["prop2"].counterexamples:
        assert not prop2_first_order(replay_trace(example)).holds
    for example in reports["prop3"].counterexamples:
        assert not prop3_second_order(replay_trace(example)).holds
