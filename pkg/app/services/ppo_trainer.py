"""
PPO training of the per-step detection policy.

Rewards follow the four correctness cases plus a bias penalty when one action
dominates recent decisions. Updates recompute the full recurrent rollout with
gradients so the policy/value heads and the fused GRU train end to end.
"""
import copy
import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, Field, model_validator
from sklearn.metrics import f1_score

from app.errors import NonFiniteError, PreconditionError
from app.services.detector import DetectorParams, embedding_table
from app.services.graph_core import AttributedGraph
from app.services.victim_model import VictimModel
from app.settings import DTYPE

logger = logging.getLogger(__name__)

TRAINING_LOG_HEADER = ("episode", "mean_reward", "policy_loss", "value_loss", "entropy", "val_f1")


class RewardConfig(BaseModel):
    w_tp: float = Field(1.0, gt=0)
    w_tn: float = Field(1.0, gt=0)
    w_fp: float = Field(1.0, gt=0)
    w_fn: float = Field(2.0, gt=0)
    p_bias: float = Field(3.0, gt=0)
    bias_fraction_threshold: float = Field(0.9, gt=0.5, le=1.0)
    bias_window: int = Field(64, ge=1)

    @model_validator(mode="after")
    def check_ordering(self):
        if not (self.p_bias > self.w_fn > max(self.w_tp, self.w_tn, self.w_fp)):
            raise ValueError(
                f"reward weights must satisfy p_bias > w_fn > max(w_tp, w_tn, w_fp), got "
                f"p_bias={self.p_bias}, w_fn={self.w_fn}, w_tp={self.w_tp}, w_tn={self.w_tn}, w_fp={self.w_fp}"
            )
        return self


class PPOConfig(BaseModel):
    hidden_dim: int = Field(32, ge=1)
    learning_rate: float = Field(0.003, gt=0)
    clip_eps: float = Field(0.2, gt=0)
    gamma: float = Field(0.99, ge=0, le=1)
    lambda_gae: float = Field(0.95, ge=0, le=1)
    entropy_coef: float = Field(0.01, ge=0)
    value_coef: float = Field(0.5, ge=0)
    update_epochs: int = Field(4, ge=1)
    episodes: int = Field(60, ge=1)
    batch_users: int = Field(64, ge=1)
    max_grad_norm: float = Field(1.0, gt=0)


def compute_reward(action: int, truth: int, batch_action_fraction: float, cfg: RewardConfig) -> float:
    if batch_action_fraction > cfg.bias_fraction_threshold:
        return -cfg.p_bias
    if action == 1:
        return cfg.w_tp if truth == 1 else -cfg.w_fp
    return cfg.w_tn if truth == 0 else -cfg.w_fn


class BiasWindow:
    """Rolling record of the last ``size`` decisions."""

    def __init__(self, size: int = 64):
        self.size = size
        self._actions = deque(maxlen=size)

    def push(self, action: int) -> float:
        """Record ``action``; return its share of the window, or 0 until the window fills."""
        self._actions.append(int(action))
        if len(self._actions) < self.size:
            return 0.0
        return sum(1 for a in self._actions if a == action) / self.size


class PolicyValueHeads(nn.Module):
    def __init__(self, hidden_dim: int = 32, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 7919)
        bound = 1.0 / np.sqrt(hidden_dim)
        self.policy_weight = nn.Parameter((torch.rand(hidden_dim, 2, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.policy_bias = nn.Parameter(torch.zeros(2, dtype=DTYPE))
        self.value_weight = nn.Parameter((torch.rand(hidden_dim, 1, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.value_bias = nn.Parameter(torch.zeros(1, dtype=DTYPE))

    def policy(self, hidden: torch.Tensor) -> torch.Tensor:
        return torch.softmax(hidden @ self.policy_weight + self.policy_bias, dim=-1)

    def value(self, hidden: torch.Tensor) -> torch.Tensor:
        return (hidden @ self.value_weight + self.value_bias).squeeze(-1)

    def forward(self, hidden: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.policy(hidden), self.value(hidden)


@dataclass
class Trajectory:
    user_id: int
    truth: int
    embeddings: torch.Tensor
    states: torch.Tensor
    actions: torch.Tensor
    logprobs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    advantages: Optional[torch.Tensor] = None
    returns: Optional[torch.Tensor] = None

    def __post_init__(self):
        t = self.embeddings.shape[0]
        for name in ("actions", "logprobs", "values", "rewards"):
            if getattr(self, name).shape[0] != t:
                raise PreconditionError(f"trajectory field {name} has length {getattr(self, name).shape[0]}, expected {t}")

    @property
    def length(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass
class Rollout:
    hidden: torch.Tensor  # (B, T, H)
    probs: torch.Tensor  # (B, T, 2)
    values: torch.Tensor  # (B, T)


def unroll(
    params: DetectorParams,
    heads: PolicyValueHeads,
    embeddings: torch.Tensor,
) -> Rollout:
    """Run a padded (B, T, d) batch; each step's policy output feeds the next mapping."""
    batch, steps, _ = embeddings.shape
    hidden = torch.zeros(batch, params.hidden_dim, dtype=DTYPE)
    prev = torch.zeros(batch, params.input_dim, dtype=DTYPE)
    probs = torch.full((batch, 2), 0.5, dtype=DTYPE)
    hiddens, all_probs, values = [], [], []
    for t in range(steps):
        current = embeddings[:, t]
        hidden, _ = params(current, prev, hidden, probs)
        if not torch.isfinite(hidden).all():
            raise NonFiniteError("non-finite detector hidden state", step=t + 1)
        probs, value = heads(hidden)
        prev = current
        hiddens.append(hidden)
        all_probs.append(probs)
        values.append(value)
    return Rollout(torch.stack(hiddens, dim=1), torch.stack(all_probs, dim=1), torch.stack(values, dim=1))


def pad_embeddings(sequences: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (T_i, d) tensors into (B, T_max, d) plus a validity mask."""
    lengths = torch.as_tensor([s.shape[0] for s in sequences])
    padded = nn.utils.rnn.pad_sequence(list(sequences), batch_first=True)
    mask = torch.arange(padded.shape[1])[None, :] < lengths[:, None]
    return padded, mask


def gae_advantages(traj: Trajectory, gamma: float, lambda_gae: float, bootstrap: bool = True) -> Trajectory:
    """Fill ``advantages`` and ``returns`` (unnormalized).

    The detector watches an open-ended stream, so the last step bootstraps
    from its own value estimate unless ``bootstrap`` is False.
    """
    if traj.length == 0:
        raise PreconditionError("empty trajectory")
    rewards = traj.rewards.to(DTYPE)
    values = traj.values.detach().to(DTYPE)
    advantages = torch.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(traj.length)):
        if t + 1 < traj.length:
            next_value = values[t + 1]
        else:
            next_value = values[t] if bootstrap else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lambda_gae * running
        advantages[t] = running
    traj.advantages = advantages
    traj.returns = advantages + values
    return traj


@dataclass
class PPOBatch:
    embeddings: torch.Tensor
    mask: torch.Tensor
    actions: torch.Tensor
    old_logprobs: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor


def collate(trajectories: Sequence[Trajectory], normalize: bool = True) -> PPOBatch:
    if not trajectories:
        raise PreconditionError("empty PPO batch")
    if any(t.advantages is None for t in trajectories):
        raise PreconditionError("advantages must be computed before collation")
    embeddings, mask = pad_embeddings([t.embeddings for t in trajectories])

    def pad(name):
        return nn.utils.rnn.pad_sequence([getattr(t, name).detach() for t in trajectories], batch_first=True)

    advantages = pad("advantages")
    if normalize:
        valid = advantages[mask]
        std = valid.std(correction=0) if valid.numel() > 1 else torch.tensor(0.0, dtype=DTYPE)
        advantages = torch.where(mask, (advantages - valid.mean()) / (std + 1e-8), torch.zeros_like(advantages))
    return PPOBatch(embeddings, mask, pad("actions").long(), pad("logprobs"), advantages, pad("returns"))


def ppo_objective(
    params: DetectorParams,
    heads: PolicyValueHeads,
    batch: PPOBatch,
    clip_eps: float,
    entropy_coef: float,
    value_coef: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    rollout = unroll(params, heads, batch.embeddings)
    mask = batch.mask
    probs = rollout.probs.clamp_min(1e-12)
    logprobs = torch.log(probs.gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1))
    ratio = torch.exp(logprobs - batch.old_logprobs)
    unclipped = ratio * batch.advantages
    clipped = torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * batch.advantages
    policy_loss = -torch.min(unclipped, clipped)[mask].mean()
    value_loss = ((rollout.values - batch.returns) ** 2)[mask].mean()
    entropy = -(probs * torch.log(probs)).sum(-1)[mask].mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    diagnostics = {
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy.detach()),
        "mean_ratio": float(ratio.detach()[mask].mean()),
    }
    return loss, diagnostics


def ppo_update(
    params: DetectorParams,
    heads: PolicyValueHeads,
    trajectories: Union[Sequence[Trajectory], PPOBatch],
    clip_eps: float = 0.2,
    entropy_coef: float = 0.01,
    value_coef: float = 0.5,
    epochs: int = 4,
    optimizer: Optional[torch.optim.Optimizer] = None,
    max_grad_norm: Optional[float] = None,
) -> List[Dict[str, float]]:
    """Clipped-surrogate updates; parameters change in place. Returns per-epoch diagnostics."""
    batch = trajectories if isinstance(trajectories, PPOBatch) else collate(trajectories)
    if optimizer is None:
        optimizer = torch.optim.Adam(list(params.parameters()) + list(heads.parameters()), lr=0.003)
    history = []
    for epoch in range(epochs):
        optimizer.zero_grad()
        loss, diagnostics = ppo_objective(params, heads, batch, clip_eps, entropy_coef, value_coef)
        if not torch.isfinite(loss):
            logger.warning("PPO epoch %d aborted: non-finite loss %s", epoch, float(loss.detach()))
            diagnostics["aborted"] = True
            history.append(diagnostics)
            break
        loss.backward()
        if max_grad_norm is not None:
            nn.utils.clip_grad_norm_(list(params.parameters()) + list(heads.parameters()), max_grad_norm)
        optimizer.step()
        diagnostics["loss"] = float(loss.detach())
        history.append(diagnostics)
    return history


@torch.no_grad()
def step_decisions(
    params: DetectorParams,
    heads: PolicyValueHeads,
    table: torch.Tensor,
    sequences: Sequence,
) -> List[np.ndarray]:
    """Argmax action at every step of every sequence (evaluation mode, no sampling)."""
    if not sequences:
        return []
    padded, mask = pad_embeddings([table[torch.as_tensor(s.nodes)] for s in sequences])
    actions = unroll(params, heads, padded).probs.argmax(dim=-1)
    return [actions[i, : int(mask[i].sum())].numpy() for i in range(len(sequences))]


def final_decisions(params, heads, table, sequences) -> np.ndarray:
    return np.array([d[-1] for d in step_decisions(params, heads, table, sequences)], dtype=np.int64)


@dataclass
class TrainResult:
    params: DetectorParams
    heads: PolicyValueHeads
    best_val_f1: float
    best_episode: int
    history: List[Dict[str, float]] = field(default_factory=list)


def _append_log(path: Path, row: Sequence) -> None:
    fresh = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(TRAINING_LOG_HEADER)
        writer.writerow(row)


def collect_trajectories(
    params: DetectorParams,
    heads: PolicyValueHeads,
    table: torch.Tensor,
    users: Sequence,
    reward_cfg: RewardConfig,
    generator: torch.Generator,
) -> List[Trajectory]:
    """Sampled-action rollouts with per-step rewards in (user, step) order."""
    embeddings = [table[torch.as_tensor(s.nodes)] for s in users]
    padded, mask = pad_embeddings(embeddings)
    with torch.no_grad():
        rollout = unroll(params, heads, padded)
    window = BiasWindow(reward_cfg.bias_window)
    trajectories = []
    for i, seq in enumerate(users):
        t_len = int(mask[i].sum())
        probs = rollout.probs[i, :t_len]
        actions = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        rewards = torch.tensor(
            [compute_reward(int(a), seq.truth_label, window.push(int(a)), reward_cfg) for a in actions],
            dtype=DTYPE,
        )
        trajectories.append(Trajectory(
            user_id=seq.user_id,
            truth=seq.truth_label,
            embeddings=embeddings[i],
            states=rollout.hidden[i, :t_len],
            actions=actions,
            logprobs=torch.log(probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1).clamp_min(1e-12)),
            values=rollout.values[i, :t_len],
            rewards=rewards,
        ))
    return trajectories


def train_detector(
    pool: Sequence,
    g: AttributedGraph,
    victim: VictimModel,
    lam: float,
    cfg: Optional[PPOConfig] = None,
    reward_cfg: Optional[RewardConfig] = None,
    seed: int = 0,
    val_pool: Optional[Sequence] = None,
    standard_gru: bool = False,
    no_mapping_matrix: bool = False,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Episodic PPO; the parameters with the best validation F1 are returned."""
    cfg = cfg or PPOConfig()
    reward_cfg = reward_cfg or RewardConfig()
    if len({s.truth_label for s in pool}) < 2:
        raise PreconditionError("training pool must contain both attackers and legitimate users")
    val_pool = list(val_pool) if val_pool else list(pool)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    table = embedding_table(g, victim, lam)
    params = DetectorParams(table.shape[1], cfg.hidden_dim, seed=seed,
                            standard_gru=standard_gru, no_mapping_matrix=no_mapping_matrix)
    heads = PolicyValueHeads(cfg.hidden_dim, seed=seed)
    optimizer = torch.optim.Adam(list(params.parameters()) + list(heads.parameters()), lr=cfg.learning_rate)
    val_truth = np.array([s.truth_label for s in val_pool])

    best = (-1.0, 0, copy.deepcopy(params.state_dict()), copy.deepcopy(heads.state_dict()))
    history = []
    for episode in range(1, cfg.episodes + 1):
        order = rng.permutation(len(pool))[: cfg.batch_users]
        users = [pool[i] for i in sorted(order)]
        trajectories = collect_trajectories(params, heads, table, users, reward_cfg, generator)
        for traj in trajectories:
            gae_advantages(traj, cfg.gamma, cfg.lambda_gae)
        updates = ppo_update(
            params, heads, trajectories, cfg.clip_eps, cfg.entropy_coef, cfg.value_coef,
            cfg.update_epochs, optimizer, cfg.max_grad_norm,
        )
        predictions = final_decisions(params, heads, table, val_pool)
        val_f1 = float(f1_score(val_truth, predictions, zero_division=0))
        last = updates[-1]
        mean_reward = float(torch.cat([t.rewards for t in trajectories]).mean())
        row = {
            "episode": episode,
            "mean_reward": mean_reward,
            "policy_loss": last["policy_loss"],
            "value_loss": last["value_loss"],
            "entropy": last["entropy"],
            "val_f1": val_f1,
        }
        history.append(row)
        if log_path is not None:
            _append_log(Path(log_path), [episode] + [f"{row[k]:.6f}" for k in TRAINING_LOG_HEADER[1:]])
        logger.debug("Episode %d reward %.3f val F1 %.3f", episode, mean_reward, val_f1)
        if val_f1 > best[0]:
            best = (val_f1, episode, copy.deepcopy(params.state_dict()), copy.deepcopy(heads.state_dict()))

    params.load_state_dict(best[2])
    heads.load_state_dict(best[3])
    logger.info("Detector trained for %d episodes, best validation F1 %.3f at episode %d",
                cfg.episodes, best[0], best[1])
    return TrainResult(params=params, heads=heads, best_val_f1=best[0], best_episode=best[1], history=history)
