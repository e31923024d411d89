"""
Composite-state Markov model of legitimate query behavior.

Legitimate sequences become query lists (consecutive hops weighted by BFS
distance), padded to a common length k. A composite state (i, q) sits at
position q of list i; moving to (j, s) costs a Boltzmann list transition
i -> j times a Boltzmann position transition q -> s inside list j.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from app.errors import PreconditionError
from app.services.graph_core import AttributedGraph

logger = logging.getLogger(__name__)


@dataclass
class QueryList:
    nodes: List[int]
    edge_weights: List[float]
    user_id: Optional[int] = None

    def __post_init__(self):
        if not self.nodes:
            raise PreconditionError("a query list needs at least one node")
        if len(self.edge_weights) != len(self.nodes) - 1:
            raise PreconditionError("one edge weight per consecutive query pair")
        if any(w < 0 for w in self.edge_weights):
            raise PreconditionError("edge weights must be non-negative")

    @property
    def padded_length(self) -> int:
        return len(self.nodes)

    @property
    def distinct_nodes(self) -> int:
        return len(set(self.nodes))


def build_query_lists(normals: Sequence, g: AttributedGraph) -> List[QueryList]:
    """One list per sequence; sequences with an unreachable consecutive pair are skipped."""
    dist = g.distance_matrix()
    lists = []
    for seq in normals:
        nodes = [g.check_node(v) for v in seq.nodes]
        if not nodes:
            raise PreconditionError("empty query sequence")
        weights = [float(dist[a, b]) for a, b in zip(nodes, nodes[1:])]
        if not all(math.isfinite(w) for w in weights):
            logger.warning("Skipping user %s: consecutive queries in different components", seq.user_id)
            continue
        lists.append(QueryList(nodes=nodes, edge_weights=weights, user_id=seq.user_id))
    return lists


def pad_lists(lists: Sequence[QueryList]) -> Tuple[List[QueryList], int]:
    """Pad every list to the longest length by repeating its last node with zero weights."""
    if not lists:
        raise PreconditionError("need at least one query list")
    k = max(l.padded_length for l in lists)
    padded = []
    for l in lists:
        extra = k - l.padded_length
        padded.append(QueryList(
            nodes=l.nodes + [l.nodes[-1]] * extra,
            edge_weights=l.edge_weights + [0.0] * extra,
            user_id=l.user_id,
        ))
    return padded, k


def list_distance(a: QueryList, b: QueryList, g: AttributedGraph) -> float:
    """Sum of position-wise shortest-path lengths; inf if any pair is disconnected."""
    if a.padded_length != b.padded_length:
        raise PreconditionError("lists must be padded to the same length")
    dist = g.distance_matrix()
    return float(sum(dist[u, v] for u, v in zip(a.nodes, b.nodes)))


@dataclass
class CompositeChain:
    lists: List[QueryList]
    lambda_s: float
    lambda_n: float
    list_distances: np.ndarray
    list_transitions: np.ndarray
    query_transitions: np.ndarray  # (J, k, k)
    initial: np.ndarray = field(init=False)

    def __post_init__(self):
        self.initial = np.zeros((self.J, self.k))
        self.initial[0, 0] = 1.0

    @property
    def J(self) -> int:
        return len(self.lists)

    @property
    def k(self) -> int:
        return self.lists[0].padded_length

    def emissions(self) -> np.ndarray:
        """(J, k) node id emitted by each composite state."""
        return np.array([l.nodes for l in self.lists], dtype=np.int64)

    def step(self, pi: np.ndarray) -> np.ndarray:
        through_lists = self.list_transitions.T @ pi
        return np.einsum("jq,jqs->js", through_lists, self.query_transitions)


def build_chain(
    lists: Sequence[QueryList],
    g: AttributedGraph,
    lambda_s: float = 1.0,
    lambda_n: float = 1.0,
) -> CompositeChain:
    """Boltzmann list and position kernels; lists[0] is the start, the rest ordered by distance to it."""
    if not lists:
        raise PreconditionError("need at least one query list")
    if lambda_s < 0 or lambda_n < 0:
        raise PreconditionError("sensitivities must be non-negative")
    if len({l.padded_length for l in lists}) != 1:
        lists, _ = pad_lists(lists)
    lists = list(lists)
    J = len(lists)
    raw = np.array([[list_distance(a, b, g) for b in lists] for a in lists])
    if not np.isfinite(raw).all():
        raise PreconditionError("query lists span disconnected components")

    order = [0] + sorted(range(1, J), key=lambda i: (raw[i, 0], i))
    lists = [lists[i] for i in order]
    distances = raw[np.ix_(order, order)]
    list_transitions = softmax(-lambda_s * distances, axis=1)

    dist = g.distance_matrix()
    query_transitions = np.stack([
        softmax(-lambda_n * dist[np.ix_(l.nodes, l.nodes)], axis=1) for l in lists
    ])
    return CompositeChain(
        lists=lists,
        lambda_s=lambda_s,
        lambda_n=lambda_n,
        list_distances=distances,
        list_transitions=list_transitions,
        query_transitions=query_transitions,
    )


def k_step_distribution(chain: CompositeChain, K: int) -> np.ndarray:
    if K < 0:
        raise PreconditionError("K must be non-negative")
    pi = chain.initial.copy()
    for _ in range(K):
        pi = chain.step(pi)
    return pi


def composite_kernel(chain: CompositeChain) -> np.ndarray:
    """Dense (J*k) x (J*k) kernel with state (i, q) at index i*k + q."""
    J, k = chain.J, chain.k
    kernel = np.einsum("ij,jqs->iqjs", chain.list_transitions, chain.query_transitions)
    return kernel.reshape(J * k, J * k)


def select_disjoint_lists(lists: Sequence[QueryList], n: int) -> List[QueryList]:
    """
    Greedy node-disjoint subset, in input order.

    Every node must lie in [0, n); the result then holds at most
    ceil(n / |l_min|) lists, |l_min| being the fewest distinct nodes of a chosen list.
    """
    for l in lists:
        if any(not 0 <= v < n for v in l.nodes):
            raise PreconditionError(f"query list {list(l.nodes)} has nodes outside [0, {n})")
    chosen: List[QueryList] = []
    used = set()
    for l in lists:
        members = set(l.nodes)
        if members & used:
            continue
        chosen.append(l)
        used |= members
    return chosen


def sequence_log_likelihood(chain: CompositeChain, nodes: Sequence[int]) -> float:
    """Forward log-probability of a node path.

    The path starts at the first composite state (in chain order) emitting its
    first node; every later state must emit the observed node.
    """
    if not nodes:
        raise PreconditionError("empty node path")
    emissions = chain.emissions()
    starts = np.argwhere(emissions == nodes[0])
    if starts.size == 0:
        return float("-inf")
    alpha = np.zeros((chain.J, chain.k))
    alpha[tuple(starts[0])] = 1.0
    log_prob = 0.0
    for v in nodes[1:]:
        alpha = chain.step(alpha) * (emissions == v)
        total = alpha.sum()
        if total <= 0:
            return float("-inf")
        log_prob += math.log(total)
        alpha /= total
    return log_prob


def chain_from_sequences(
    normals: Sequence,
    g: AttributedGraph,
    max_lists: int = 8,
    lambda_s: float = 1.0,
    lambda_n: float = 1.0,
) -> CompositeChain:
    """Chain over up to ``max_lists`` legitimate sequences that share the first list's component."""
    lists = build_query_lists(normals, g)
    if not lists:
        raise PreconditionError("no usable legitimate sequences")
    dist = g.distance_matrix()
    anchor = lists[0].nodes[0]
    kept = [l for l in lists if np.isfinite(dist[anchor, l.nodes]).all()][:max_lists]
    if len(kept) < len(lists):
        logger.info("Chain uses %d of %d query lists", len(kept), len(lists))
    return build_chain(kept, g, lambda_s, lambda_n)
