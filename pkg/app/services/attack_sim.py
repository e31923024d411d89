"""
Training-data generation for the detector: simulated extraction attacks driven
by three active-learning query strategies, legitimate users, surrogate
training and fidelity-based labeling.
"""
import csv
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import entropy as scipy_entropy
from sklearn.cluster import KMeans

from app.errors import GraphFormatError, PreconditionError
from app.services.graph_core import (
    AttributedGraph,
    from_edges,
    induced_distance_matrix,
    percentile_transform,
)
from app.services.victim_model import (
    VictimModel,
    VictimTrainConfig,
    fit_gcn,
    hidden_embeddings,
    normalized_propagation,
    predicted_labels,
    probabilities,
)

logger = logging.getLogger(__name__)


class Origin(str, Enum):
    AGE = "AGE"
    GRAIN = "GRAIN"
    IGP = "IGP"
    NORMAL = "NORMAL"

    @property
    def is_attack(self) -> bool:
        return self is not Origin.NORMAL


@dataclass(frozen=True)
class QueryRecord:
    user_id: int
    step: int
    node: int
    response_label: Optional[int] = None
    response_probs: Optional[Tuple[float, ...]] = None


@dataclass
class QuerySequence:
    user_id: int
    records: List[QueryRecord]
    truth_label: int
    origin: Origin
    fidelity: Optional[float] = None

    def __post_init__(self):
        if not self.records:
            raise PreconditionError("a query sequence needs at least one query")
        steps = [r.step for r in self.records]
        if any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] < 1:
            raise PreconditionError("query steps must start at 1 and strictly increase")
        if self.truth_label == 1 and not self.origin.is_attack:
            raise PreconditionError("only attack sequences can carry label 1")

    @property
    def nodes(self) -> List[int]:
        return [r.node for r in self.records]

    @property
    def length(self) -> int:
        return len(self.records)

    def with_user(self, user_id: int) -> "QuerySequence":
        records = [replace(r, user_id=user_id) for r in self.records]
        return replace(self, user_id=user_id, records=records)


@dataclass
class SurrogateResult:
    model: VictimModel
    fidelity: float
    queries_used: int
    diverged: bool = False


@dataclass
class AttackOutcome:
    sequence: QuerySequence
    surrogate: SurrogateResult
    mask_fraction: float = 0.0
    budget: int = 0


def _emit(
    g: AttributedGraph,
    victim: Optional[VictimModel],
    nodes: Sequence[int],
    user_id: int,
    origin: Origin,
) -> QuerySequence:
    probs = probabilities(victim, g) if victim is not None else None
    records = []
    for step, v in enumerate(nodes, start=1):
        if probs is None:
            records.append(QueryRecord(user_id, step, int(v)))
        else:
            row = probs[v]
            records.append(QueryRecord(user_id, step, int(v), int(np.argmax(row)), tuple(float(p) for p in row)))
    return QuerySequence(
        user_id=user_id,
        records=records,
        truth_label=1 if origin.is_attack else 0,
        origin=origin,
    )


def _check_mask(g: AttributedGraph, subgraph_mask: Iterable[int], budget: int) -> List[int]:
    mask = sorted({g.check_node(int(v)) for v in subgraph_mask})
    if not mask:
        raise PreconditionError("attacker-visible mask is empty")
    if budget <= 0:
        raise PreconditionError("query budget must be positive")
    return mask


def node_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a probability matrix."""
    return scipy_entropy(np.asarray(probs, dtype=np.float64).T)


def _neighbors_in(g: AttributedGraph, v: int, allowed: set) -> List[int]:
    return [u for u in g.graph.neighbors(v) if u in allowed]


def age_scores(g: AttributedGraph, victim: VictimModel, mask: Sequence[int], seed: int = 0) -> np.ndarray:
    """Equal-weight mix of entropy, density and centrality percentiles over the mask."""
    mask = list(mask)
    probs = probabilities(victim, g)[mask]
    entropy_perc = percentile_transform(node_entropy(probs))

    embeddings = hidden_embeddings(victim, g)[mask]
    clusters = max(1, min(victim.class_count, len(mask)))
    kmeans = KMeans(n_clusters=clusters, n_init=1, max_iter=10, random_state=seed).fit(embeddings)
    distances = np.linalg.norm(embeddings[:, None, :] - kmeans.cluster_centers_[None, :, :], axis=2)
    density_perc = percentile_transform(-distances.mean(axis=1))

    centrality_perc = percentile_transform(g.degrees()[mask].astype(np.float64))
    return (entropy_perc + density_perc + centrality_perc) / 3.0


def neighborhood_average(g: AttributedGraph, mask: Sequence[int], scores: np.ndarray) -> np.ndarray:
    """S_avg(v): mean of S over v and its neighbors inside the mask."""
    position = {v: i for i, v in enumerate(mask)}
    allowed = set(mask)
    out = np.empty(len(mask))
    for i, v in enumerate(mask):
        nbrs = _neighbors_in(g, v, allowed)
        out[i] = (sum(scores[position[u]] for u in nbrs) + scores[i]) / (len(nbrs) + 1)
    return out


def age_sequence(
    g: AttributedGraph,
    victim: VictimModel,
    subgraph_mask: Iterable[int],
    budget: int,
    seed: int = 0,
    user_id: int = 0,
) -> QuerySequence:
    mask = _check_mask(g, subgraph_mask, budget)
    averaged = neighborhood_average(g, mask, age_scores(g, victim, mask, seed))
    order = sorted(range(len(mask)), key=lambda i: (-averaged[i], mask[i]))
    chosen = [mask[i] for i in order[: min(budget, len(mask))]]
    return _emit(g, victim, chosen, user_id, Origin.AGE)


def _closed_neighborhoods(g: AttributedGraph) -> np.ndarray:
    return (g.adjacency() + np.eye(g.node_count)) > 0


def visible_distances(g: AttributedGraph, mask: Sequence[int]) -> Tuple[np.ndarray, float]:
    """
    Hop counts inside the attacker-visible subgraph and its diameter (at least 1).

    Pairs the visible subgraph does not connect are set to the diameter, so the
    mean pairwise distance of any selection stays within [0, diameter].
    """
    dist = induced_distance_matrix(g, mask)
    finite = np.isfinite(dist)
    diameter = float(max(1.0, dist[finite].max())) if finite.any() else 1.0
    dist[~finite] = diameter
    return dist, diameter


def grain_objective(g: AttributedGraph, selected: Sequence[int], gamma: float, mask: Sequence[int]) -> float:
    """Coverage share of the closed neighborhoods plus mean pairwise visible distance over the visible diameter."""
    if not selected:
        return 0.0
    closed = _closed_neighborhoods(g)
    coverage = closed[list(selected)].any(axis=0).sum() / g.node_count
    dist, diameter = visible_distances(g, mask)
    k = len(selected)
    mean_pair = dist[np.ix_(selected, selected)].sum() / (k * (k - 1)) if k >= 2 else 0.0
    return float(coverage + gamma * mean_pair / diameter)


def grain_sequence(
    g: AttributedGraph,
    victim: VictimModel,
    subgraph_mask: Iterable[int],
    budget: int,
    gamma: float = 1.0,
    user_id: int = 0,
    trace: Optional[List[float]] = None,
) -> QuerySequence:
    """
    Greedy influence/diversity selection.

    ``trace`` collects each pick's signed change of the objective. The coverage
    part never shrinks; the diversity part drops when a pick sits closer to the
    earlier picks than their current mean distance, so late entries can be negative.
    """
    mask = _check_mask(g, subgraph_mask, budget)
    dist, diameter = visible_distances(g, mask)
    closed = _closed_neighborhoods(g)
    n = g.node_count

    covered = np.zeros(n, dtype=bool)
    remaining = list(mask)
    selected: List[int] = []
    pair_sum = 0.0
    dist_to_selected = np.zeros(n)
    current = 0.0
    for _ in range(min(budget, len(mask))):
        cand = np.asarray(remaining)
        coverage = (covered.sum() + (closed[cand] & ~covered).sum(axis=1)) / n
        k = len(selected) + 1
        if k >= 2:
            mean_pair = (pair_sum + dist_to_selected[cand]) * 2.0 / (k * (k - 1))
        else:
            mean_pair = np.zeros(len(cand))
        objective = coverage + gamma * mean_pair / diameter
        gains = objective - current
        best = int(np.argmax(gains))  # first maximum -> lowest node id among ties
        v = int(cand[best])
        if trace is not None:
            trace.append(float(gains[best]))
        current = float(objective[best])
        pair_sum += dist_to_selected[v]
        dist_to_selected += dist[v]
        covered |= closed[v]
        selected.append(v)
        remaining.remove(v)
    return _emit(g, victim, selected, user_id, Origin.GRAIN)


def igp_ranking(
    g: AttributedGraph,
    beliefs: np.ndarray,
    candidates: Sequence[int],
    alpha: float,
) -> List[int]:
    """Candidates ordered by alpha*P_centrality + (1-alpha)*P_entropy, best first."""
    candidates = list(candidates)
    centrality = percentile_transform(g.degrees()[candidates].astype(np.float64))
    uncertainty = percentile_transform(node_entropy(beliefs[candidates]))
    score = alpha * centrality + (1.0 - alpha) * uncertainty
    order = sorted(range(len(candidates)), key=lambda i: (-score[i], candidates[i]))
    return [candidates[i] for i in order]


def _propagate_label(beliefs: np.ndarray, propagation: np.ndarray, v: int, label: int, members: Sequence[int]) -> np.ndarray:
    """Beliefs of ``members`` after revealing ``label`` at v."""
    updated = beliefs[members].copy()
    onehot = np.zeros(beliefs.shape[1])
    onehot[label] = 1.0
    for i, u in enumerate(members):
        if u == v:
            updated[i] = onehot
        else:
            row = beliefs[u] + propagation[u, v] * onehot
            updated[i] = row / row.sum()
    return updated


def igp_sequence(
    g: AttributedGraph,
    victim: VictimModel,
    subgraph_mask: Iterable[int],
    budget: int,
    alpha: float = 0.5,
    prefilter_k: int = 10,
    user_id: int = 0,
) -> QuerySequence:
    mask = _check_mask(g, subgraph_mask, budget)
    if prefilter_k <= 0:
        raise PreconditionError("prefilter_k must be positive")
    propagation = normalized_propagation(g).numpy()
    beliefs = probabilities(victim, g).copy()
    responses = predicted_labels(victim, g)
    remaining = list(mask)
    chosen: List[int] = []
    for _ in range(min(budget, len(mask))):
        shortlist = igp_ranking(g, beliefs, remaining, alpha)[:prefilter_k]
        best_v, best_gain = shortlist[0], -np.inf
        for v in shortlist:
            members = [v, *sorted(g.graph.neighbors(v))]
            pseudo = int(np.argmax(beliefs[v]))
            before = node_entropy(beliefs[members]).sum()
            after = node_entropy(_propagate_label(beliefs, propagation, v, pseudo, members)).sum()
            gain = before - after
            if gain > best_gain + 1e-12:
                best_v, best_gain = v, gain
        members = [best_v, *sorted(g.graph.neighbors(best_v))]
        beliefs[members] = _propagate_label(beliefs, propagation, best_v, int(responses[best_v]), members)
        chosen.append(best_v)
        remaining.remove(best_v)
    return _emit(g, victim, chosen, user_id, Origin.IGP)


def normal_sequence(
    g: AttributedGraph,
    victim: Optional[VictimModel],
    length_range: Tuple[int, int],
    style: str = "random_walk",
    seed: int = 0,
    user_id: int = 0,
) -> QuerySequence:
    low, high = length_range
    if low < 1 or high < low:
        raise PreconditionError(f"invalid length range {length_range}")
    if high > g.node_count:
        raise PreconditionError(f"length range {length_range} exceeds node count {g.node_count}")
    rng = np.random.default_rng(seed)
    length = int(rng.integers(low, high + 1))
    if style == "random_nodes":
        nodes = [int(v) for v in rng.choice(g.node_count, size=length, replace=False)]
    elif style == "random_walk":
        starts = [v for v in range(g.node_count) if g.graph.degree(v) > 0]
        if not starts:
            raise PreconditionError("random walk needs at least one edge")
        current = int(starts[rng.integers(len(starts))])
        nodes = [current]
        while len(nodes) < length:
            nbrs = sorted(g.graph.neighbors(current))
            current = int(nbrs[rng.integers(len(nbrs))])
            nodes.append(current)
    else:
        raise PreconditionError(f"unknown normal-user style {style!r}")
    return _emit(g, victim, nodes, user_id, Origin.NORMAL)


def fidelity_from_labels(surrogate_labels: np.ndarray, victim_labels: np.ndarray) -> float:
    surrogate_labels = np.asarray(surrogate_labels)
    victim_labels = np.asarray(victim_labels)
    if surrogate_labels.shape != victim_labels.shape or surrogate_labels.size == 0:
        raise PreconditionError("label vectors must be non-empty and equally long")
    return float((surrogate_labels == victim_labels).mean())


def fidelity(surrogate: VictimModel, victim: VictimModel, g: AttributedGraph) -> float:
    return fidelity_from_labels(predicted_labels(surrogate, g), predicted_labels(victim, g))


def attacker_view(g: AttributedGraph, queried: Sequence[int]) -> Tuple[AttributedGraph, List[int]]:
    """Union of the queried ego subgraphs, relabeled densely. Returns (view, node order)."""
    members = set()
    for v in queried:
        members.add(v)
        members.update(g.graph.neighbors(v))
    order = sorted(members)
    index = {v: i for i, v in enumerate(order)}
    edges = [(index[a], index[b]) for a, b in g.graph.subgraph(order).edges()]
    view = from_edges(len(order), edges, features=g.features[order])
    return view, order


def train_surrogate(
    g: AttributedGraph,
    victim: VictimModel,
    seq: QuerySequence,
    config: Optional[VictimTrainConfig] = None,
) -> SurrogateResult:
    """Fit a same-architecture GCN on what the attacker observed, score it on all of G."""
    config = config or VictimTrainConfig()
    queried = list(dict.fromkeys(seq.nodes))
    view, order = attacker_view(g, queried)
    index = {v: i for i, v in enumerate(order)}
    victim_labels = predicted_labels(victim, g)
    targets = [
        int(r.response_label) if r.response_label is not None else int(victim_labels[r.node])
        for r in {r.node: r for r in seq.records}.values()
    ]
    surrogate, diverged = fit_gcn(
        view,
        [index[v] for v in queried],
        targets,
        victim.class_count,
        config.model_copy(update={"hidden_dim": victim.hidden_dim}),
        raise_on_divergence=False,
    )
    score = fidelity(surrogate, victim, g)
    if diverged:
        logger.warning("Surrogate for user %d diverged; fidelity %.3f kept as flagged", seq.user_id, score)
    return SurrogateResult(model=surrogate, fidelity=score, queries_used=seq.length, diverged=diverged)


def label_and_pool(
    attacks: Sequence[AttackOutcome],
    normals: Sequence[QuerySequence],
    f_hi: float = 0.65,
    f_lo: float = 0.2,
    short_len: int = 20,
    seed: int = 0,
) -> List[QuerySequence]:
    """Label attack sequences by fidelity and length, merge with normals, shuffle."""
    if not (0.0 <= f_lo < f_hi <= 1.0):
        raise PreconditionError(f"fidelity thresholds must satisfy 0 <= f_lo < f_hi <= 1, got {f_lo}, {f_hi}")
    pool: List[QuerySequence] = []
    discarded = 0
    for outcome in attacks:
        seq, score = outcome.sequence, outcome.surrogate.fidelity
        label = attack_label(score, seq.length, f_hi, f_lo, short_len)
        if label is None:
            discarded += 1
            continue
        pool.append(replace(seq, truth_label=label, fidelity=score))
    for seq in normals:
        pool.append(replace(seq, truth_label=0, fidelity=None))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    shuffled = [pool[i].with_user(user_id) for user_id, i in enumerate(order)]
    logger.info(
        "Pooled %d users (%d attackers, %d legitimate), %d attack sequences discarded",
        len(shuffled),
        sum(s.truth_label for s in shuffled),
        sum(1 - s.truth_label for s in shuffled),
        discarded,
    )
    return shuffled


def attack_label(score: float, length: int, f_hi: float, f_lo: float, short_len: int) -> Optional[int]:
    if score > f_hi and length > short_len:
        return 1
    if score < f_lo or length <= short_len:
        return 0
    return None


def simulate_attacks(
    g: AttributedGraph,
    victim: VictimModel,
    mask_fractions: Sequence[float],
    budgets: Sequence[int],
    strategies: Sequence[Origin] = (Origin.AGE, Origin.GRAIN, Origin.IGP),
    repeats: int = 1,
    seed: int = 0,
    surrogate_config: Optional[VictimTrainConfig] = None,
    gamma: float = 1.0,
    alpha: float = 0.5,
    prefilter_k: int = 10,
) -> List[AttackOutcome]:
    """One attack per (strategy, mask fraction, budget, repeat); each owns a seeded stream."""
    cells = [
        (origin, fraction, budget, r)
        for r in range(repeats)
        for fraction in mask_fractions
        for budget in budgets
        for origin in strategies
    ]
    streams = np.random.SeedSequence(seed).spawn(len(cells))
    outcomes = []
    for user_id, ((origin, fraction, budget, _), stream) in enumerate(zip(cells, streams)):
        rng = np.random.default_rng(stream)
        mask_size = max(1, int(round(fraction * g.node_count)))
        mask = sorted(int(v) for v in rng.choice(g.node_count, size=mask_size, replace=False))
        capped = min(int(budget), mask_size)
        stream_seed = int(rng.integers(2**31 - 1))
        if origin is Origin.AGE:
            seq = age_sequence(g, victim, mask, capped, seed=stream_seed, user_id=user_id)
        elif origin is Origin.GRAIN:
            seq = grain_sequence(g, victim, mask, capped, gamma=gamma, user_id=user_id)
        elif origin is Origin.IGP:
            seq = igp_sequence(g, victim, mask, capped, alpha=alpha, prefilter_k=prefilter_k, user_id=user_id)
        else:
            raise PreconditionError(f"{origin} is not an attack strategy")
        config = (surrogate_config or VictimTrainConfig()).model_copy(update={"seed": stream_seed})
        outcomes.append(AttackOutcome(seq, train_surrogate(g, victim, seq, config), fraction, capped))
        logger.debug("Attack %d (%s, mask %.2f, budget %d) fidelity %.3f", user_id, origin.value, fraction, capped,
                     outcomes[-1].surrogate.fidelity)
    logger.info("Simulated %d attack sequences", len(outcomes))
    return outcomes


def simulate_normals(
    g: AttributedGraph,
    victim: Optional[VictimModel],
    count: int,
    length_range: Tuple[int, int],
    styles: Sequence[str] = ("random_walk", "random_nodes"),
    seed: int = 0,
) -> List[QuerySequence]:
    streams = np.random.SeedSequence(seed + 1).generate_state(count)
    return [
        normal_sequence(g, victim, length_range, styles[i % len(styles)], seed=int(s), user_id=i)
        for i, s in enumerate(streams)
    ]


POOL_HEADER = ("user_id", "label", "origin", "fidelity", "nodes")


def write_pool(pool: Sequence[QuerySequence], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("# " + ",".join(POOL_HEADER) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for seq in pool:
            writer.writerow([
                seq.user_id,
                seq.truth_label,
                seq.origin.value,
                "" if seq.fidelity is None else f"{seq.fidelity:.6f}",
                ";".join(str(v) for v in seq.nodes),
            ])


def read_pool(
    path: Union[str, Path],
    g: Optional[AttributedGraph] = None,
    victim: Optional[VictimModel] = None,
) -> List[QuerySequence]:
    """Parse a pool file; responses are re-queried from ``victim`` when given."""
    path = Path(path)
    pool = []
    with path.open("r", encoding="utf-8") as fh:
        for number, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 5:
                raise GraphFormatError("expected 5 comma-separated fields", path=str(path), line_number=number)
            try:
                user_id, label = int(row[0]), int(row[1])
                origin = Origin(row[2])
                score = float(row[3]) if row[3] else None
                nodes = [int(tok) for tok in row[4].split(";") if tok]
            except ValueError as e:
                raise GraphFormatError(f"malformed pool row ({e})", path=str(path), line_number=number)
            if g is not None:
                nodes = [g.check_node(v) for v in nodes]
            seq = _emit(g, victim, nodes, user_id, origin) if g is not None else QuerySequence(
                user_id, [QueryRecord(user_id, t, v) for t, v in enumerate(nodes, start=1)], label, origin
            )
            pool.append(replace(seq, truth_label=label, fidelity=score))
    return pool
