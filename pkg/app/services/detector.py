"""
Sequential detector: k-core-scaled query embeddings and a GRU whose input
blends each embedding with its step-to-step difference and whose hidden state
is modulated by the previous decision's probabilities.
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from scipy.special import expit

from app.errors import CheckpointFormatError, NonFiniteError, PreconditionError
from app.services.graph_core import AttributedGraph, k_core_numbers
from app.services.victim_model import VictimModel, hidden_embeddings
from app.settings import DTYPE

logger = logging.getLogger(__name__)

DETECTOR_MAGIC = b"ATOMdetv1\n"
TAG_BYTES = 12


def scale_factor(x: float, lam: float) -> float:
    """1 + lam * (sigmoid(lam * x) - 0.5) * 2, confined to (1 - lam, 1 + lam)."""
    if lam < 0:
        raise PreconditionError(f"lambda must be non-negative, got {lam}")
    return 1.0 + lam * (float(expit(lam * x)) - 0.5) * 2.0


def core_ratio(cores: np.ndarray, v: int) -> float:
    """log(p_v) / log(p_max) with core numbers clamped to at least 1."""
    p_max = max(int(cores.max()) if cores.size else 1, 1)
    if p_max == 1:
        return 1.0
    return math.log(max(int(cores[v]), 1)) / math.log(p_max)


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray
    core_ratio: float
    lam: float

    @property
    def multiplier(self) -> float:
        return scale_factor(self.core_ratio, self.lam)


def embed_query(g: AttributedGraph, victim: VictimModel, v: int, lam: float) -> QueryEmbedding:
    v = g.check_node(v)
    members = [v, *g.graph.neighbors(v)]
    mean = hidden_embeddings(victim, g)[members].mean(axis=0)
    ratio = core_ratio(k_core_numbers(g), v)
    return QueryEmbedding(vector=mean * scale_factor(ratio, lam), core_ratio=ratio, lam=lam)


def embedding_table(g: AttributedGraph, victim: VictimModel, lam: float) -> torch.Tensor:
    """Row v holds embed_query(g, victim, v, lam).vector for every node at once."""
    if lam < 0:
        raise PreconditionError(f"lambda must be non-negative, got {lam}")
    closed = g.adjacency() + np.eye(g.node_count)
    means = closed @ hidden_embeddings(victim, g) / closed.sum(axis=1, keepdims=True)
    cores = k_core_numbers(g)
    multipliers = np.array([scale_factor(core_ratio(cores, v), lam) for v in range(g.node_count)])
    return torch.as_tensor(means * multipliers[:, None], dtype=DTYPE)


def _uniform_init(shape: Tuple[int, ...], fan_in: int, generator: torch.Generator) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter((torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound)


class DetectorParams(nn.Module):
    """Fusion gate, GRU gates and the decision-to-state mapping.

    Row-vector convention: every transform is ``x @ W + b``. The ablation
    flags switch off the fusion input (``standard_gru``) or pin the mapping
    vector to ones (``no_mapping_matrix``).
    """

    PARAM_ORDER = ("W_g", "b_g", "W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h", "W_a", "b_a")

    def __init__(
        self,
        input_dim: int = 16,
        hidden_dim: int = 32,
        seed: int = 0,
        standard_gru: bool = False,
        no_mapping_matrix: bool = False,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        d, h = input_dim, hidden_dim
        self.W_g = _uniform_init((2 * d, d), 2 * d, gen)
        self.b_g = _uniform_init((d,), 2 * d, gen)
        self.W_z = _uniform_init((d, h), h, gen)
        self.U_z = _uniform_init((h, h), h, gen)
        self.b_z = _uniform_init((h,), h, gen)
        self.W_r = _uniform_init((d, h), h, gen)
        self.U_r = _uniform_init((h, h), h, gen)
        self.b_r = _uniform_init((h,), h, gen)
        self.W_h = _uniform_init((d, h), h, gen)
        self.U_h = _uniform_init((h, h), h, gen)
        self.b_h = _uniform_init((h,), h, gen)
        # m starts at exactly 1 and learns away from it
        self.W_a = nn.Parameter(torch.zeros(2, h, dtype=DTYPE))
        self.b_a = nn.Parameter(torch.ones(h, dtype=DTYPE))
        self.standard_gru = standard_gru
        self.no_mapping_matrix = no_mapping_matrix

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[1]

    def fuse(self, h: torch.Tensor, prev: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        if self.standard_gru:
            return h, None
        delta = h - prev
        gate = torch.sigmoid(torch.cat([delta, h], dim=-1) @ self.W_g + self.b_g)
        return gate * delta + (1.0 - gate) * h, gate

    def gru(self, x: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
        z = torch.sigmoid(x @ self.W_z + hidden @ self.U_z + self.b_z)
        r = torch.sigmoid(x @ self.W_r + hidden @ self.U_r + self.b_r)
        candidate = torch.tanh(x @ self.W_h + (r * hidden) @ self.U_h + self.b_h)
        return (1.0 - z) * hidden + z * candidate

    def mapping(self, prev_probs: torch.Tensor) -> torch.Tensor:
        if self.no_mapping_matrix:
            return torch.ones(*prev_probs.shape[:-1], self.hidden_dim, dtype=DTYPE)
        return prev_probs @ self.W_a + self.b_a

    def forward(
        self, h: torch.Tensor, prev: torch.Tensor, hidden: torch.Tensor, prev_probs: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """One update for a batch of users. Returns (new hidden, mapping used)."""
        x, _ = self.fuse(h, prev)
        m = self.mapping(prev_probs)
        return self.gru(x, hidden) * m, m


@dataclass
class DetectorState:
    hidden: torch.Tensor
    prev_embedding: torch.Tensor
    prev_action_probs: torch.Tensor
    prev_mapping: Optional[torch.Tensor] = None
    step: int = 0

    @classmethod
    def initial(cls, params: DetectorParams) -> "DetectorState":
        return cls(
            hidden=torch.zeros(params.hidden_dim, dtype=DTYPE),
            prev_embedding=torch.zeros(params.input_dim, dtype=DTYPE),
            prev_action_probs=torch.full((2,), 0.5, dtype=DTYPE),
        )


def fused_step(
    params: DetectorParams,
    state: DetectorState,
    emb: Union[QueryEmbedding, torch.Tensor, np.ndarray],
) -> DetectorState:
    vector = emb.vector if isinstance(emb, QueryEmbedding) else emb
    h = torch.as_tensor(vector, dtype=DTYPE)
    if h.shape != (params.input_dim,):
        raise PreconditionError(f"embedding has shape {tuple(h.shape)}, expected ({params.input_dim},)")
    hidden, m = params(h, state.prev_embedding, state.hidden, state.prev_action_probs)
    step = state.step + 1
    if not torch.isfinite(hidden).all():
        raise NonFiniteError("non-finite detector hidden state", step=step)
    return DetectorState(
        hidden=hidden,
        prev_embedding=h,
        prev_action_probs=state.prev_action_probs,
        prev_mapping=m,
        step=step,
    )


def run_sequence(
    params: DetectorParams,
    seq,
    g: AttributedGraph,
    victim: VictimModel,
    lam: float,
    heads: Optional[nn.Module] = None,
    table: Optional[torch.Tensor] = None,
) -> List[DetectorState]:
    """Fold fused_step over a user's queries.

    With ``heads`` the policy's probabilities after each step feed the next
    step's mapping; without them the probabilities stay uniform.
    """
    nodes = seq.nodes if hasattr(seq, "nodes") else list(seq)
    if not nodes:
        raise PreconditionError("cannot run an empty sequence")
    if table is None:
        table = embedding_table(g, victim, lam)
    states = []
    state = DetectorState.initial(params)
    with torch.no_grad():
        for v in nodes:
            state = fused_step(params, state, table[g.check_node(v)])
            if heads is not None:
                state.prev_action_probs = heads.policy(state.hidden)
            states.append(state)
    return states


def save_detector(
    params: DetectorParams,
    path: Union[str, Path],
    heads: Optional[nn.Module] = None,
    lam: float = 1.0,
    tag: str = "",
) -> None:
    """Magic, dims/flags header, then every matrix row-major in declaration order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(DETECTOR_MAGIC)
        fh.write(struct.pack(
            "<qqBBBd", params.input_dim, params.hidden_dim,
            int(params.standard_gru), int(params.no_mapping_matrix), int(heads is not None), lam,
        ))
        fh.write(tag.encode("ascii")[:TAG_BYTES].ljust(TAG_BYTES, b" "))
        for name in DetectorParams.PARAM_ORDER:
            fh.write(np.ascontiguousarray(getattr(params, name).detach().numpy(), dtype="<f8").tobytes())
        if heads is not None:
            for _, tensor in heads.state_dict().items():
                fh.write(np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8").tobytes())
    logger.info("Detector checkpoint written to %s", path)


@dataclass
class DetectorCheckpoint:
    params: DetectorParams
    heads: Optional[nn.Module]
    lam: float
    tag: str = ""


def load_detector(path: Union[str, Path]) -> DetectorCheckpoint:
    from app.services.ppo_trainer import PolicyValueHeads

    data = Path(path).read_bytes()
    if not data.startswith(DETECTOR_MAGIC):
        raise CheckpointFormatError(f"{path}: missing {DETECTOR_MAGIC!r} header")
    offset = len(DETECTOR_MAGIC)
    header = struct.Struct("<qqBBBd")
    try:
        d, h, standard_gru, no_mapping, has_heads, lam = header.unpack_from(data, offset)
        offset += header.size
        tag = data[offset:offset + TAG_BYTES].decode("ascii").strip()
        offset += TAG_BYTES
        params = DetectorParams(d, h, standard_gru=bool(standard_gru), no_mapping_matrix=bool(no_mapping))
        heads = PolicyValueHeads(h) if has_heads else None
        targets = [(params, name, getattr(params, name).shape) for name in DetectorParams.PARAM_ORDER]
        if heads is not None:
            targets += [(heads, name, t.shape) for name, t in heads.state_dict().items()]
        states = {}
        for module, name, shape in targets:
            count = int(np.prod(shape))
            values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
            states.setdefault(id(module), {})[name] = torch.as_tensor(values.copy(), dtype=DTYPE)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: truncated detector checkpoint ({e})")
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - offset} trailing bytes")
    params.load_state_dict(states[id(params)])
    if heads is not None:
        heads.load_state_dict(states[id(heads)])
    return DetectorCheckpoint(params=params, heads=heads, lam=float(lam), tag=tag)
