"""
Executable checks of the coverage bounds relating cover-set size, minimum
degree, covering rate and uncovered weight, with exhaustive and randomized
sweeps over small graphs.

Statements are evaluated exactly as written; sweeps count violations and dump
each violating instance so it can be replayed.
"""
import csv
import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel

from app.errors import PreconditionError, UndefinedBoundError
from app.services.graph_core import AttributedGraph, from_edges

logger = logging.getLogger(__name__)

REPORT_HEADER = ("statement", "instances_checked", "violations", "tightest_ratio")
TOLERANCE = 1e-12

GRAPH_DEGREE = "graph"
INDUCED_DEGREE = "induced"

# How a trace instantiates the "at least" / "at most" covering rates of its steps.
BOUND_RATES = "bounds"
MEASURED_RATES = "measured"


@dataclass(frozen=True, eq=False)
class CoverageInstance:
    graph: AttributedGraph
    weights: np.ndarray
    cover_set: FrozenSet[int]
    degree_mode: str = GRAPH_DEGREE

    def __post_init__(self):
        if not self.cover_set:
            raise PreconditionError("cover set must be nonempty")
        for v in self.cover_set:
            self.graph.check_node(v)
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (self.graph.node_count,) or not (weights > 0).all():
            raise PreconditionError("weights must be positive, one per node")
        if self.degree_mode not in (GRAPH_DEGREE, INDUCED_DEGREE):
            raise PreconditionError(f"unknown degree mode {self.degree_mode!r}")
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return self.graph.node_count

    @cached_property
    def covered(self) -> FrozenSet[int]:
        """Union of the open neighborhoods of the cover set."""
        out = set()
        for u in self.cover_set:
            out.update(self.graph.graph.neighbors(u))
        return frozenset(out)

    def covered_by_adjacency(self) -> FrozenSet[int]:
        rows = self.graph.adjacency()[sorted(self.cover_set)]
        return frozenset(int(v) for v in np.flatnonzero(rows.any(axis=0)))

    @property
    def uncovered(self) -> FrozenSet[int]:
        return frozenset(range(self.n)) - self.covered

    @property
    def beta(self) -> float:
        return len(self.covered) / self.n

    @cached_property
    def delta(self) -> int:
        if self.degree_mode == INDUCED_DEGREE:
            induced = self.graph.graph.subgraph(self.cover_set)
            return min(d for _, d in induced.degree())
        return min(self.graph.graph.degree(v) for v in self.cover_set)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def uncovered_weight(self) -> float:
        return float(self.weights[sorted(self.uncovered)].sum())

    @property
    def avg_uncovered_weight(self) -> Optional[float]:
        if not self.uncovered:
            return None
        return self.uncovered_weight / len(self.uncovered)

    def rescaled(self, factor: float) -> "CoverageInstance":
        return CoverageInstance(self.graph, self.weights * factor, self.cover_set, self.degree_mode)


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.holds))


def theorem1_bound(inst: CoverageInstance) -> float:
    """min of the weight branch and |D|*delta/n; the weight branch needs A nonempty and a positive denominator."""
    delta = inst.delta
    if delta == 0:
        raise UndefinedBoundError("a cover node has degree 0; the bound is undefined")
    n, size = inst.n, len(inst.cover_set)
    degree_branch = size * delta / n
    wbar = inst.avg_uncovered_weight
    if wbar is None:
        return degree_branch
    ratio = inst.total_weight / wbar
    denominator = n / delta - ratio
    if denominator <= 0:
        return degree_branch
    return min((size - ratio) / denominator, degree_branch)


def check_theorem1(inst: CoverageInstance) -> BoundCheck:
    bound = theorem1_bound(inst)
    return BoundCheck(inst.beta, bound, inst.beta <= bound + TOLERANCE)


@dataclass(eq=False)
class CoverageTrace:
    """
    Two or three strictly nested cover sets (previous, current, following) on one weighted graph.

    ``rates`` picks the covering rates fed to the statements. With ``"measured"``
    every step uses its measured coverage. With ``"bounds"`` (default) a step's
    lower rate is the largest value its premises allow,
    ``min(|D|*delta/n, 1 - W_A/W)``, and its upper rate the smallest,
    ``max(|D|*delta/n, 1 - W_A/W)``; an upper rate above 1 leaves no valid
    covering rate and the trace is rejected.
    """

    previous: CoverageInstance
    current: CoverageInstance
    following: Optional[CoverageInstance] = None
    w_d: Optional[float] = None
    rates: str = BOUND_RATES

    def __post_init__(self):
        steps = [s for s in (self.previous, self.current, self.following) if s is not None]
        for a, b in zip(steps, steps[1:]):
            if a.graph is not b.graph or not np.array_equal(a.weights, b.weights):
                raise PreconditionError("trace steps must share one weighted graph")
            if not a.cover_set < b.cover_set:
                raise PreconditionError("cover sets must be strictly nested")
        if self.rates not in (BOUND_RATES, MEASURED_RATES):
            raise PreconditionError(f"unknown rate mode {self.rates!r}")
        if self.w_d is None:
            self.w_d = self.weight_drop

    @classmethod
    def from_sets(
        cls,
        graph: AttributedGraph,
        weights: np.ndarray,
        sets: Iterable[Iterable[int]],
        w_d: Optional[float] = None,
        degree_mode: str = INDUCED_DEGREE,
        rates: str = BOUND_RATES,
    ) -> "CoverageTrace":
        steps = [CoverageInstance(graph, weights, frozenset(s), degree_mode) for s in sets]
        if len(steps) not in (2, 3):
            raise PreconditionError("a trace holds two or three cover sets")
        return cls(*steps, w_d=w_d, rates=rates)

    def lower_rate(self, step: CoverageInstance) -> float:
        if self.rates == MEASURED_RATES:
            return step.beta
        return min(len(step.cover_set) * step.delta / step.n, 1.0 - step.uncovered_weight / step.total_weight)

    def upper_rate(self, step: CoverageInstance) -> float:
        if self.rates == MEASURED_RATES:
            return step.beta
        degree_rate = len(step.cover_set) * step.delta / step.n
        if degree_rate > 1.0 + TOLERANCE:
            raise PreconditionError(f"|D|*delta = {len(step.cover_set) * step.delta} exceeds n = {step.n}")
        return max(degree_rate, 1.0 - step.uncovered_weight / step.total_weight)

    @property
    def n(self) -> int:
        return self.current.n

    @property
    def total_weight(self) -> float:
        return self.current.total_weight

    @property
    def weight_drop(self) -> float:
        """Uncovered weight lost between the previous and current sets."""
        return self.previous.uncovered_weight - self.current.uncovered_weight

    @property
    def next_weight_drop(self) -> float:
        return self.current.uncovered_weight - self._following().uncovered_weight

    @property
    def delta_size(self) -> int:
        return len(self.current.cover_set) - len(self.previous.cover_set)

    @property
    def next_delta_size(self) -> int:
        return len(self._following().cover_set) - len(self.current.cover_set)

    @property
    def delta_beta(self) -> float:
        return self.upper_rate(self.current) - self.lower_rate(self.previous)

    @property
    def next_delta_beta(self) -> float:
        # the (t, t+1) pair starts from the lower rate at t
        return self.upper_rate(self._following()) - self.lower_rate(self.current)

    @property
    def delta_delta(self) -> int:
        return self.current.delta - self.previous.delta

    @property
    def next_delta_delta(self) -> int:
        return self._following().delta - self.current.delta

    def first_order(self) -> float:
        return self.weight_drop / self.delta_size

    def next_first_order(self) -> float:
        return self.next_weight_drop / self.next_delta_size

    def second_order(self) -> float:
        return abs(self.first_order() - self.next_first_order())

    def _following(self) -> CoverageInstance:
        if self.following is None:
            raise PreconditionError("statement needs a following cover set")
        return self.following


def prop2_rhs(trace: CoverageTrace) -> float:
    prev, cur = trace.previous, trace.current
    if cur.delta <= prev.delta:
        raise PreconditionError(f"minimum degree must rise, got {prev.delta} -> {cur.delta}")
    if trace.delta_size <= 0:
        raise PreconditionError("cover set must grow")
    if len(cur.cover_set) * cur.delta < len(prev.cover_set) * prev.delta:
        raise PreconditionError("size times minimum degree must not shrink between steps")
    return trace.delta_beta * trace.total_weight / (len(prev.cover_set) * (1.0 - prev.delta / cur.delta))


def prop2_first_order(trace: CoverageTrace) -> BoundCheck:
    """Weight drop per added cover node against its coverage-gain ceiling."""
    rhs = prop2_rhs(trace)
    lhs = trace.first_order()
    return BoundCheck(lhs, rhs, lhs <= rhs + TOLERANCE * max(1.0, abs(rhs)))


def _check_second_order_preconditions(trace: CoverageTrace) -> None:
    prev, cur, nxt = trace.previous, trace.current, trace._following()
    if not (nxt.delta > cur.delta > prev.delta):
        raise PreconditionError(f"minimum degrees must rise, got {prev.delta}, {cur.delta}, {nxt.delta}")
    if trace.weight_drop < trace.w_d - TOLERANCE:
        raise PreconditionError(f"weight drop {trace.weight_drop} below floor {trace.w_d}")
    if trace.delta_beta == 0:
        raise PreconditionError("coverage did not change between t-1 and t")
    if trace.next_delta_delta == 0:
        raise PreconditionError("minimum degree did not change between t and t+1")


def prop3_rhs(trace: CoverageTrace) -> float:
    _check_second_order_preconditions(trace)
    first = trace.w_d / trace.n * trace.delta_delta / trace.delta_beta
    second = trace.total_weight * trace.following.delta / len(trace.current.cover_set) \
        * trace.next_delta_beta / trace.next_delta_delta
    return abs(first - second)


def prop3_second_order(trace: CoverageTrace) -> BoundCheck:
    rhs = prop3_rhs(trace)
    lhs = trace.second_order()
    return BoundCheck(lhs, rhs, lhs >= rhs - TOLERANCE * max(1.0, abs(rhs)))


def theorem4_threshold(trace: CoverageTrace) -> Tuple[float, bool]:
    """(threshold on W_d, whether the promised bound ordering holds when triggered)."""
    _check_second_order_preconditions(trace)
    threshold = (
        trace.n * trace.following.delta * trace.delta_beta
        / (len(trace.previous.cover_set) * trace.delta_delta)
        * (trace.delta_beta / trace.delta_delta + trace.next_delta_beta / trace.next_delta_delta)
        * trace.total_weight
    )
    if trace.w_d < threshold:
        return threshold, True
    lower = prop3_rhs(trace)
    upper = prop2_rhs(trace)
    return threshold, lower >= upper - TOLERANCE * max(1.0, abs(upper))


def _ratio(smaller: float, larger: float) -> float:
    """smaller/larger as a tightness score; above 1 means the claim failed."""
    if larger > 0:
        return smaller / larger
    if smaller <= larger:
        return 1.0 if smaller == larger else 0.0
    return float("inf")


class Counterexample(BaseModel):
    statement: str
    node_count: int
    edges: List[Tuple[int, int]]
    weights: List[float]
    cover_sets: List[List[int]]
    degree_mode: str
    rates: Optional[str] = None
    quantities: Dict[str, float]


@dataclass
class SweepReport:
    statement: str
    instances_checked: int = 0
    violations: int = 0
    tightest_ratio: float = 0.0
    rejected: int = 0
    counterexamples: List[Counterexample] = field(default_factory=list)

    def record(self, smaller: float, larger: float, holds: bool, example=None, max_examples: int = 20):
        self.instances_checked += 1
        self.tightest_ratio = max(self.tightest_ratio, _ratio(smaller, larger))
        if not holds:
            self.violations += 1
            if example is not None and len(self.counterexamples) < max_examples:
                self.counterexamples.append(example())

    def record_batch(self, smaller: np.ndarray, larger: np.ndarray, holds: np.ndarray, example=None,
                     max_examples: int = 20):
        """Vectorized ``record``; ``example(k)`` builds the counterexample for entry k."""
        self.instances_checked += int(holds.size)
        smaller, larger = np.asarray(smaller, dtype=np.float64), np.asarray(larger, dtype=np.float64)
        positive = larger > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(
                positive,
                smaller / np.where(positive, larger, 1.0),
                np.where(smaller < larger, 0.0, np.where(smaller == larger, 1.0, np.inf)),
            )
        if ratios.size:
            self.tightest_ratio = max(self.tightest_ratio, float(ratios.max()))
        failing = np.flatnonzero(~holds)
        self.violations += int(failing.size)
        if example is not None:
            for k in failing[: max(0, max_examples - len(self.counterexamples))]:
                self.counterexamples.append(example(int(k)))

    def row(self) -> Tuple[str, int, int, str]:
        return self.statement, self.instances_checked, self.violations, f"{self.tightest_ratio:.6f}"


def _counterexample(
    statement: str,
    steps: List[CoverageInstance],
    quantities: Dict[str, float],
    rates: Optional[str] = None,
) -> Counterexample:
    g = steps[0].graph
    return Counterexample(
        statement=statement,
        node_count=g.node_count,
        edges=g.edges(),
        weights=[float(w) for w in steps[0].weights],
        cover_sets=[sorted(s.cover_set) for s in steps],
        degree_mode=steps[0].degree_mode,
        rates=rates,
        quantities=quantities,
    )


def connected_graphs(max_n: int, min_n: int = 2) -> Iterable[AttributedGraph]:
    """Every connected simple graph with min_n..max_n nodes (max_n <= 7), up to isomorphism."""
    if max_n > 7:
        raise PreconditionError("the graph atlas only covers graphs with up to 7 nodes")
    for atlas_graph in nx.graph_atlas_g():
        n = atlas_graph.number_of_nodes()
        if n < min_n or n > max_n or not nx.is_connected(atlas_graph):
            continue
        yield from_edges(n, list(atlas_graph.edges()))


def theorem1_exhaustive(
    max_n: int = 7,
    weight_draws: int = 50,
    seed: int = 0,
    max_examples: int = 20,
) -> SweepReport:
    """Every connected graph up to ``max_n`` nodes, every nonempty cover set, random weights."""
    rng = np.random.default_rng(seed)
    report = SweepReport("theorem1")
    for g in connected_graphs(max_n):
        n = g.node_count
        degrees = g.degrees()
        draws = rng.uniform(0.1, 1.0, size=(weight_draws, n))
        totals = draws.sum(axis=1)
        for size in range(1, n + 1):
            for cover in itertools.combinations(range(n), size):
                inst = CoverageInstance(g, draws[0], frozenset(cover))
                delta = int(degrees[list(cover)].min())
                uncovered = sorted(inst.uncovered)
                degree_branch = size * delta / n
                bounds = np.full(weight_draws, degree_branch)
                if uncovered:
                    ratio = totals / draws[:, uncovered].mean(axis=1)
                    denominator = n / delta - ratio
                    with np.errstate(divide="ignore", invalid="ignore"):
                        weight_branch = np.where(denominator > 0, (size - ratio) / denominator, np.inf)
                    bounds = np.minimum(bounds, weight_branch)
                beta = inst.beta
                report.record_batch(
                    np.full(weight_draws, beta), bounds, beta <= bounds + TOLERANCE,
                    example=lambda k: _counterexample(
                        "theorem1", [CoverageInstance(g, draws[k], frozenset(cover))],
                        {"beta": beta, "bound": float(bounds[k]), "delta": float(delta)},
                    ),
                    max_examples=max_examples,
                )
    logger.info("Theorem 1 sweep: %d instances, %d violations", report.instances_checked, report.violations)
    return report


def random_trace(
    g: AttributedGraph,
    rng: np.random.Generator,
    steps: int = 3,
    attempts: int = 50,
    rates: str = BOUND_RATES,
) -> Optional[CoverageTrace]:
    """Grow random nested cover sets whose induced minimum degree strictly rises; None if stuck."""
    n = g.node_count
    start_size = int(rng.integers(1, max(2, n // 2)))
    sets = [frozenset(int(v) for v in rng.choice(n, size=start_size, replace=False))]
    weights = rng.uniform(0.1, 1.0, size=n)

    def induced_delta(nodes):
        return min(d for _, d in g.graph.subgraph(nodes).degree())

    for _ in range(steps - 1):
        current = sets[-1]
        rest = [v for v in range(n) if v not in current]
        grown = None
        for _ in range(attempts):
            if not rest:
                break
            k = int(rng.integers(1, min(3, len(rest)) + 1))
            candidate = current | frozenset(int(v) for v in rng.choice(rest, size=k, replace=False))
            if induced_delta(candidate) > induced_delta(current):
                grown = candidate
                break
        if grown is None:
            return None
        sets.append(grown)
    trace = CoverageTrace.from_sets(g, weights, sets, rates=rates)
    trace.w_d = trace.weight_drop * float(rng.uniform(0.0, 1.0))
    return trace


def random_connected_graph(rng: np.random.Generator, min_n: int = 5, max_n: int = 10) -> AttributedGraph:
    while True:
        n = int(rng.integers(min_n, max_n + 1))
        p = float(rng.uniform(0.3, 0.8))
        candidate = nx.gnp_random_graph(n, p, seed=int(rng.integers(2**31 - 1)))
        if nx.is_connected(candidate):
            return from_edges(n, list(candidate.edges()))


def trace_sweep(
    count: int = 500,
    seed: int = 0,
    max_n: int = 10,
    max_examples: int = 20,
    max_attempts: int = 200_000,
    rates: str = BOUND_RATES,
) -> Dict[str, SweepReport]:
    """Randomly grown traces checked against the first-order, second-order and threshold statements."""
    rng = np.random.default_rng(seed)
    reports = {name: SweepReport(name) for name in ("prop2", "prop3", "theorem4")}
    attempts = 0
    while min(reports["prop2"].instances_checked, reports["prop3"].instances_checked) < count:
        attempts += 1
        if attempts > max_attempts:
            logger.warning("Trace sweep stopped after %d attempts", attempts - 1)
            break
        trace = random_trace(random_connected_graph(rng, max_n=max_n), rng, rates=rates)
        if trace is None:
            continue
        steps = [trace.previous, trace.current, trace.following]
        if reports["prop2"].instances_checked < count:
            try:
                lhs, rhs, holds = prop2_first_order(trace)
                reports["prop2"].record(lhs, rhs, holds, lambda: _counterexample(
                    "prop2", steps, {"lhs": lhs, "rhs": rhs}, rates), max_examples)
            except PreconditionError:
                reports["prop2"].rejected += 1
        if reports["prop3"].instances_checked < count:
            try:
                lhs3, rhs3, holds3 = prop3_second_order(trace)
                reports["prop3"].record(rhs3, lhs3, holds3, lambda: _counterexample(
                    "prop3", steps, {"lhs": lhs3, "rhs": rhs3, "w_d": trace.w_d}, rates), max_examples)
                threshold, implied = theorem4_threshold(trace)
                if trace.w_d >= threshold:
                    upper, lower = prop2_rhs(trace), prop3_rhs(trace)
                    reports["theorem4"].record(upper, lower, implied, lambda: _counterexample(
                        "theorem4", steps, {"threshold": threshold, "w_d": trace.w_d,
                                            "prop2_rhs": upper, "prop3_rhs": lower}, rates), max_examples)
            except PreconditionError:
                reports["prop3"].rejected += 1
    for report in reports.values():
        logger.info("%s sweep: %d checked, %d rejected, %d violations",
                    report.statement, report.instances_checked, report.rejected, report.violations)
    return reports


def write_report(reports: Iterable[SweepReport], out_dir: Union[str, Path]) -> Path:
    """Report CSV plus one JSON file per stored counterexample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "theory_report.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerow(report.row())
            for i, example in enumerate(report.counterexamples):
                (out_dir / f"counterexample_{report.statement}_{i:03d}.json").write_text(
                    example.model_dump_json(indent=2), encoding="utf-8"
                )
    return path


def replay_trace(example: Counterexample) -> CoverageTrace:
    """Rebuild the trace a stored counterexample was taken from."""
    g = from_edges(example.node_count, [tuple(e) for e in example.edges])
    return CoverageTrace.from_sets(
        g, np.asarray(example.weights), example.cover_sets,
        w_d=example.quantities.get("w_d"), degree_mode=example.degree_mode,
        rates=example.rates or BOUND_RATES,
    )
