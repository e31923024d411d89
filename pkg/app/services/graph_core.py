"""
Attributed graph storage plus the graph algorithms the other services use:
k-core numbers, ego subgraphs, BFS distances and degree statistics.
"""
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import networkx as nx
import numpy as np
from scipy.stats import rankdata

from app.errors import GraphFormatError, InvalidNodeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Edge = Tuple[int, int]


@dataclass(eq=False)
class AttributedGraph:
    """Simple undirected graph over dense node ids 0..n-1 with node features.

    Treat instances as immutable once built; ``core_numbers`` is computed on
    first access under a lock so concurrent readers see one result.
    """

    graph: nx.Graph
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    class_count: int = 0
    _core_numbers: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _distances: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        n = self.graph.number_of_nodes()
        if sorted(self.graph.nodes()) != list(range(n)):
            raise GraphFormatError("node ids must be dense integers 0..n-1")
        if nx.number_of_selfloops(self.graph) > 0:
            raise GraphFormatError("self-loops are not allowed")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphFormatError(
                f"feature matrix has {self.features.shape[0]} rows, expected {n}"
            )
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise GraphFormatError(f"label vector has {self.labels.shape[0]} entries, expected {n}")
            if self.class_count <= 0:
                self.class_count = int(self.labels.max()) + 1 if n else 0
            if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise GraphFormatError(f"labels must lie in [0, {self.class_count})")

    @property
    def node_count(self) -> int:
        return self.graph.number_of_nodes()

    @property
    def edge_count(self) -> int:
        return self.graph.number_of_edges()

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def check_node(self, v) -> int:
        if isinstance(v, (bool, np.bool_)) or not isinstance(v, (int, np.integer)):
            raise InvalidNodeError(v, self.node_count)
        if v < 0 or v >= self.node_count:
            raise InvalidNodeError(v, self.node_count)
        return int(v)

    def neighbors(self, v: int) -> List[int]:
        v = self.check_node(v)
        return sorted(self.graph.neighbors(v))

    def degree(self, v: int) -> int:
        return int(self.graph.degree(self.check_node(v)))

    def degrees(self) -> np.ndarray:
        return np.array([d for _, d in sorted(self.graph.degree())], dtype=np.int64)

    def adjacency(self) -> np.ndarray:
        n = self.node_count
        adj = np.zeros((n, n), dtype=np.float64)
        for u, v in self.graph.edges():
            adj[u, v] = adj[v, u] = 1.0
        return adj

    def edges(self) -> List[Edge]:
        return sorted((min(u, v), max(u, v)) for u, v in self.graph.edges())

    @property
    def core_numbers(self) -> np.ndarray:
        return k_core_numbers(self)

    def distance_matrix(self) -> np.ndarray:
        """All-pairs BFS hop counts; ``inf`` marks unreachable pairs."""
        if self._distances is None:
            with self._lock:
                if self._distances is None:
                    n = self.node_count
                    dist = np.full((n, n), np.inf)
                    for source, lengths in nx.all_pairs_shortest_path_length(self.graph):
                        for target, hops in lengths.items():
                            dist[source, target] = hops
                    dist.setflags(write=False)
                    self._distances = dist
        return self._distances


@dataclass(frozen=True)
class EgoSubgraph:
    center: int
    members: FrozenSet[int]
    edges: Tuple[Edge, ...]
    feature_view: np.ndarray

    @property
    def ordered_members(self) -> List[int]:
        return sorted(self.members)


def from_edges(
    node_count: int,
    edges: Iterable[Edge],
    features: Optional[np.ndarray] = None,
    labels: Optional[np.ndarray] = None,
    class_count: int = 0,
) -> AttributedGraph:
    """Build a graph in memory (tests, generators); duplicates collapse."""
    graph = nx.Graph()
    graph.add_nodes_from(range(node_count))
    for u, v in edges:
        if u == v:
            raise GraphFormatError(f"self-loop on node {u}")
        if not (0 <= u < node_count and 0 <= v < node_count):
            raise GraphFormatError(f"edge ({u}, {v}) out of range for {node_count} nodes")
        graph.add_edge(int(u), int(v))
    if features is None:
        features = np.ones((node_count, 1), dtype=np.float64)
    return AttributedGraph(
        graph=graph,
        features=np.asarray(features, dtype=np.float64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        class_count=class_count,
    )


def _read_lines(path: Path) -> List[Tuple[int, str]]:
    if not path.exists():
        raise GraphFormatError("file does not exist", path=str(path))
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            out.append((number, line))
    return out


def load_graph(
    edge_file: PathLike,
    feature_file: PathLike,
    label_file: Optional[PathLike] = None,
) -> AttributedGraph:
    """Parse the three dataset files into a validated graph.

    Edges are undirected. A line whose pair reverses an earlier line (``v u``
    after ``u v``) is folded into that edge, so the loaded edge count can be
    below the number of edge lines (Cora lists 5429 lines). Repeating a line's
    ordered pair exactly is rejected.
    """
    feature_path = Path(feature_file)
    rows: List[List[float]] = []
    width: Optional[int] = None
    for number, line in _read_lines(feature_path):
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise GraphFormatError("non-numeric feature value", path=str(feature_path), line_number=number)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFormatError(
                f"expected {width} features, found {len(row)}", path=str(feature_path), line_number=number
            )
        rows.append(row)
    if not rows:
        raise GraphFormatError("feature file is empty", path=str(feature_path))
    features = np.asarray(rows, dtype=np.float64)
    n = features.shape[0]

    labels = None
    if label_file is not None:
        label_path = Path(label_file)
        values = []
        for number, line in _read_lines(label_path):
            try:
                value = int(line)
            except ValueError:
                raise GraphFormatError("label is not an integer", path=str(label_path), line_number=number)
            if value < 0:
                raise GraphFormatError("negative class id", path=str(label_path), line_number=number)
            values.append(value)
        if len(values) != n:
            raise GraphFormatError(
                f"label file has {len(values)} rows but feature file has {n}", path=str(label_path)
            )
        labels = np.asarray(values, dtype=np.int64)

    edge_path = Path(edge_file)
    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    seen_ordered = set()
    folded = 0
    for number, line in _read_lines(edge_path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError("expected two tab-separated node ids", path=str(edge_path), line_number=number)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError("node id is not an integer", path=str(edge_path), line_number=number)
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(
                f"node id out of range [0, {n})", path=str(edge_path), line_number=number
            )
        if u == v:
            raise GraphFormatError(f"self-loop on node {u}", path=str(edge_path), line_number=number)
        if (u, v) in seen_ordered:
            raise GraphFormatError(f"duplicate edge ({u}, {v})", path=str(edge_path), line_number=number)
        seen_ordered.add((u, v))
        if graph.has_edge(u, v):
            folded += 1
        graph.add_edge(u, v)

    g = AttributedGraph(graph=graph, features=features, labels=labels)
    if folded:
        logger.info("Folded %d reversed edge lines into existing edges in %s", folded, edge_path)
    logger.info(
        "Loaded graph n=%d m=%d d=%d c=%d from %s", g.node_count, g.edge_count, g.feature_dim, g.class_count, edge_path
    )
    return g


def save_graph(g: AttributedGraph, edge_file: PathLike, feature_file: PathLike, label_file: Optional[PathLike] = None):
    edge_path, feature_path = Path(edge_file), Path(feature_file)
    edge_path.parent.mkdir(parents=True, exist_ok=True)
    with edge_path.open("w", encoding="utf-8") as fh:
        fh.write(f"# n={g.node_count} m={g.edge_count}\n")
        for u, v in g.edges():
            fh.write(f"{u}\t{v}\n")
    with feature_path.open("w", encoding="utf-8") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if label_file is not None and g.labels is not None:
        with Path(label_file).open("w", encoding="utf-8") as fh:
            for value in g.labels:
                fh.write(f"{int(value)}\n")


def k_core_numbers(g: AttributedGraph) -> np.ndarray:
    """Core number per node; isolated nodes get 0. Cached on the graph."""
    if g._core_numbers is None:
        with g._lock:
            if g._core_numbers is None:
                cores: Dict[int, int] = nx.core_number(g.graph)
                values = np.array([cores[v] for v in range(g.node_count)], dtype=np.int64)
                values.setflags(write=False)
                g._core_numbers = values
    return g._core_numbers


def ego_subgraph(g: AttributedGraph, v: int) -> EgoSubgraph:
    v = g.check_node(v)
    members = frozenset([v, *g.graph.neighbors(v)])
    induced = g.graph.subgraph(members)
    edges = tuple(sorted((min(a, b), max(a, b)) for a, b in induced.edges()))
    order = sorted(members)
    return EgoSubgraph(center=v, members=members, edges=edges, feature_view=g.features[order])


def shortest_path_len(g: AttributedGraph, u: int, v: int) -> Optional[int]:
    """BFS hop count, or ``None`` when v is unreachable from u."""
    u, v = g.check_node(u), g.check_node(v)
    try:
        return int(nx.shortest_path_length(g.graph, u, v))
    except nx.NetworkXNoPath:
        return None


def degree_percentiles(g: AttributedGraph) -> np.ndarray:
    return percentile_transform(g.degrees().astype(np.float64))


def percentile_transform(scores: np.ndarray) -> np.ndarray:
    """Map scores to [0, 1] by average rank; ties share a value, order kept."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size <= 1:
        return np.ones_like(scores)
    ranks = rankdata(scores, method="average")
    return (ranks - 1.0) / (scores.size - 1.0)


def induced_distance_matrix(g: AttributedGraph, nodes: Iterable[int]) -> np.ndarray:
    """BFS hop counts inside the subgraph induced by ``nodes``, indexed by node id; other pairs are ``inf``."""
    n = g.node_count
    dist = np.full((n, n), np.inf)
    for source, lengths in nx.all_pairs_shortest_path_length(g.graph.subgraph(list(nodes))):
        for target, hops in lengths.items():
            dist[source, target] = hops
    return dist


def observed_diameter(g: AttributedGraph, nodes: Iterable[int]) -> int:
    """Largest finite BFS distance inside the subgraph induced by ``nodes``."""
    dist = induced_distance_matrix(g, nodes)
    finite = dist[np.isfinite(dist)]
    return int(finite.max()) if finite.size else 0


def synthetic_two_community(
    node_count: int = 100,
    feature_dim: int = 8,
    p_in: float = 0.12,
    p_out: float = 0.01,
    noise: float = 0.5,
    seed: int = 0,
) -> AttributedGraph:
    """Two-block stochastic block model; feature column c flags community c."""
    sizes = [node_count // 2, node_count - node_count // 2]
    sbm = nx.stochastic_block_model(sizes, [[p_in, p_out], [p_out, p_in]], seed=seed)
    graph = nx.Graph()
    graph.add_nodes_from(range(node_count))
    graph.add_edges_from(sbm.edges())
    rng = np.random.default_rng(seed)
    labels = np.array([sbm.nodes[v]["block"] for v in range(node_count)], dtype=np.int64)
    features = rng.normal(0.0, noise, size=(node_count, feature_dim))
    features[np.arange(node_count), labels] += 1.0
    g = AttributedGraph(graph=graph, features=features, labels=labels, class_count=2)
    logger.info("Generated two-community graph n=%d m=%d seed=%d", g.node_count, g.edge_count, seed)
    return g
