"""
The GMLaaS victim: a two-layer graph convolutional classifier trained
transductively on one graph, plus checkpoint I/O.
"""
import logging
import struct
import threading
import weakref
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field

from app.errors import CheckpointFormatError, PreconditionError, TrainingDivergenceError
from app.services.graph_core import AttributedGraph
from app.settings import DTYPE

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATOMv1\n"

_propagation_cache: "weakref.WeakKeyDictionary[AttributedGraph, torch.Tensor]" = weakref.WeakKeyDictionary()
_propagation_lock = threading.Lock()


class VictimTrainConfig(BaseModel):
    hidden_dim: int = Field(16, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    weight_decay: float = Field(0.0005, ge=0)
    epochs: int = Field(200, ge=1)
    seed: int = 0


def normalized_propagation(g: AttributedGraph) -> torch.Tensor:
    """D~^-1/2 (A + I) D~^-1/2 as a dense tensor, cached per graph."""
    cached = _propagation_cache.get(g)
    if cached is not None:
        return cached
    with _propagation_lock:
        cached = _propagation_cache.get(g)
        if cached is None:
            adj = torch.as_tensor(g.adjacency(), dtype=DTYPE)
            adj = adj + torch.eye(g.node_count, dtype=DTYPE)
            inv_sqrt = adj.sum(dim=1).pow(-0.5)
            cached = inv_sqrt[:, None] * adj * inv_sqrt[None, :]
            _propagation_cache[g] = cached
    return cached


class VictimModel(nn.Module):
    """Two GCN layers without bias: softmax(P relu(P X W1) W2)."""

    def __init__(self, feature_dim: int, class_count: int, hidden_dim: int = 16, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.layer1_weights = nn.Parameter(torch.empty(feature_dim, hidden_dim, dtype=DTYPE))
        self.layer2_weights = nn.Parameter(torch.empty(hidden_dim, class_count, dtype=DTYPE))
        nn.init.xavier_uniform_(self.layer1_weights, generator=generator)
        nn.init.xavier_uniform_(self.layer2_weights, generator=generator)
        self.train_mask: Tuple[int, ...] = ()

    @property
    def feature_dim(self) -> int:
        return self.layer1_weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.layer1_weights.shape[1]

    @property
    def class_count(self) -> int:
        return self.layer2_weights.shape[1]

    def hidden(self, features: torch.Tensor, propagation: torch.Tensor) -> torch.Tensor:
        return F.relu(propagation @ (features @ self.layer1_weights))

    def forward(self, features: torch.Tensor, propagation: torch.Tensor) -> torch.Tensor:
        return propagation @ (self.hidden(features, propagation) @ self.layer2_weights)

    def copy(self) -> "VictimModel":
        clone = VictimModel(self.feature_dim, self.class_count, self.hidden_dim)
        clone.load_state_dict(self.state_dict())
        clone.train_mask = tuple(self.train_mask)
        return clone


def _features(g: AttributedGraph) -> torch.Tensor:
    return torch.as_tensor(g.features, dtype=DTYPE)


def gcn_loss(model: VictimModel, g: AttributedGraph, nodes: Sequence[int], targets: Sequence[int]) -> torch.Tensor:
    logits = model(_features(g), normalized_propagation(g))
    index = torch.as_tensor(list(nodes), dtype=torch.long)
    return F.cross_entropy(logits[index], torch.as_tensor(list(targets), dtype=torch.long))


def fit_gcn(
    g: AttributedGraph,
    nodes: Sequence[int],
    targets: Sequence[int],
    class_count: int,
    config: VictimTrainConfig,
    raise_on_divergence: bool = True,
) -> Tuple[VictimModel, bool]:
    """Train a fresh GCN on (node, target) pairs. Returns (model, diverged)."""
    if len(nodes) == 0:
        raise PreconditionError("train mask is empty")
    model = VictimModel(g.feature_dim, class_count, config.hidden_dim, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    features = _features(g)
    propagation = normalized_propagation(g)
    index = torch.as_tensor(list(nodes), dtype=torch.long)
    target = torch.as_tensor(list(targets), dtype=torch.long)
    model.train()
    for epoch in range(config.epochs):
        optimizer.zero_grad()
        loss = F.cross_entropy(model(features, propagation)[index], target)
        if not torch.isfinite(loss):
            message = f"non-finite loss {loss.item()} at epoch {epoch}"
            if raise_on_divergence:
                raise TrainingDivergenceError(message)
            logger.warning("GCN training diverged: %s", message)
            return model, True
        loss.backward()
        optimizer.step()
    model.eval()
    model.train_mask = tuple(int(v) for v in nodes)
    return model, False


def train_victim(
    g: AttributedGraph,
    train_mask: Iterable[int],
    config: Optional[VictimTrainConfig] = None,
) -> VictimModel:
    config = config or VictimTrainConfig()
    nodes = sorted({g.check_node(int(v)) for v in train_mask})
    if not nodes:
        raise PreconditionError("train mask is empty")
    if g.labels is None:
        raise PreconditionError("graph has no labels to train the victim on")
    model, _ = fit_gcn(g, nodes, [int(g.labels[v]) for v in nodes], g.class_count, config)
    accuracy = float((predicted_labels(model, g)[nodes] == g.labels[nodes]).mean())
    logger.info("Victim trained on %d nodes for %d epochs, train accuracy %.3f", len(nodes), config.epochs, accuracy)
    return model


@torch.no_grad()
def probabilities(m: VictimModel, g: AttributedGraph) -> np.ndarray:
    return torch.softmax(m(_features(g), normalized_propagation(g)), dim=1).numpy()


def predicted_labels(m: VictimModel, g: AttributedGraph) -> np.ndarray:
    return probabilities(m, g).argmax(axis=1)


def predict(m: VictimModel, g: AttributedGraph, v: int) -> Tuple[int, np.ndarray]:
    v = g.check_node(v)
    probs = probabilities(m, g)[v]
    return int(np.argmax(probs)), probs


@torch.no_grad()
def hidden_embeddings(m: VictimModel, g: AttributedGraph) -> np.ndarray:
    """Post-ReLU layer-1 activations for every node (n x hidden_dim)."""
    return m.hidden(_features(g), normalized_propagation(g)).numpy()


def hidden_embedding(m: VictimModel, g: AttributedGraph, v: int) -> np.ndarray:
    v = g.check_node(v)
    return hidden_embeddings(m, g)[v]


def save_victim(m: VictimModel, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<qqq", m.feature_dim, m.hidden_dim, m.class_count))
        for weights in (m.layer1_weights, m.layer2_weights):
            fh.write(np.ascontiguousarray(weights.detach().numpy(), dtype="<f8").tobytes())
        fh.write(struct.pack("<q", len(m.train_mask)))
        fh.write(np.asarray(m.train_mask, dtype="<i8").tobytes())
    logger.info("Victim checkpoint written to %s", path)


def load_victim(path: Union[str, Path]) -> VictimModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: missing {CHECKPOINT_MAGIC!r} header")
    offset = len(CHECKPOINT_MAGIC)
    try:
        d, hidden, c = struct.unpack_from("<qqq", data, offset)
        offset += 24
        model = VictimModel(d, c, hidden)
        shapes: Dict[str, Tuple[int, int]] = {"layer1_weights": (d, hidden), "layer2_weights": (hidden, c)}
        state = {}
        for name, shape in shapes.items():
            count = shape[0] * shape[1]
            values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
            state[name] = torch.as_tensor(values.copy(), dtype=DTYPE)
        (mask_len,) = struct.unpack_from("<q", data, offset)
        offset += 8
        mask = np.frombuffer(data, dtype="<i8", count=mask_len, offset=offset)
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError(f"{path}: truncated victim checkpoint ({e})")
    model.load_state_dict(state)
    model.train_mask = tuple(int(v) for v in mask)
    model.eval()
    return model
