from typing import List

import numpy as np
import pytest
import torch

from app.services.attack_sim import Origin, QueryRecord, QuerySequence
from app.services.detector import DetectorParams, save_detector
from app.services.graph_core import from_edges, save_graph, synthetic_two_community
from app.services.monitor import DETECTOR_FILE, EDGE_FILE, FEATURE_FILE, GRAPH_DIR, LABEL_FILE, VICTIM_FILE
from app.services.ppo_trainer import PolicyValueHeads
from app.services.victim_model import VictimTrainConfig, save_victim, train_victim


def make_sequence(user_id: int, nodes: List[int], label: int) -> QuerySequence:
    origin = Origin.AGE if label == 1 else Origin.NORMAL
    records = [QueryRecord(user_id, t, int(v)) for t, v in enumerate(nodes, start=1)]
    return QuerySequence(user_id, records, label, origin)


@pytest.fixture
def path_graph():
    return from_edges(4, [(0, 1), (1, 2), (2, 3)])


@pytest.fixture
def star_graph():
    return from_edges(5, [(0, 1), (0, 2), (0, 3), (0, 4)])


@pytest.fixture
def k4_graph():
    return from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


@pytest.fixture(scope="session")
def toy_graph():
    return synthetic_two_community(node_count=30, feature_dim=4, p_in=0.3, p_out=0.02, seed=0)


@pytest.fixture(scope="session")
def toy_victim(toy_graph):
    mask = list(range(0, 30, 3))
    return train_victim(toy_graph, mask, VictimTrainConfig(epochs=200, seed=0))


@pytest.fixture
def toy_pool(toy_graph):
    """Attackers sweep high-degree nodes, legitimate users walk; both labels present."""
    rng = np.random.default_rng(0)
    order = list(np.argsort(-toy_graph.degrees(), kind="stable"))
    pool = []
    for user_id in range(12):
        if user_id % 2 == 0:
            start = int(rng.integers(0, 5))
            nodes = [int(v) for v in order[start:start + 8]]
            pool.append(make_sequence(user_id, nodes, 1))
        else:
            length = int(rng.integers(4, 9))
            nodes = [int(v) for v in rng.choice(toy_graph.node_count, size=length, replace=False)]
            pool.append(make_sequence(user_id, nodes, 0))
    return pool


def write_artifacts(out, g, victim, policy_bias=None, with_detector=True, hidden_dim=8):
    """Graph, victim and (optionally) detector laid out the way the server loads them."""
    graph_dir = out / GRAPH_DIR
    save_graph(g, graph_dir / EDGE_FILE, graph_dir / FEATURE_FILE, graph_dir / LABEL_FILE)
    save_victim(victim, out / VICTIM_FILE)
    if with_detector:
        params = DetectorParams(input_dim=victim.hidden_dim, hidden_dim=hidden_dim, seed=0)
        heads = PolicyValueHeads(hidden_dim, seed=0)
        if policy_bias is not None:
            with torch.no_grad():
                heads.policy_bias.copy_(torch.tensor(policy_bias, dtype=heads.policy_bias.dtype))
        save_detector(params, out / DETECTOR_FILE, heads, lam=1.0)
    return out
