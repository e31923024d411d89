from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

LAMBDA_GRID = [0.0, 0.001, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0]
METRICS_HEADER = ("model", "dataset", "prefix", "seed", "f1", "recall", "precision", "accuracy")

_LIST_FIELDS = (
    "seeds", "lambda_grid", "strategies", "budgets", "mask_fractions", "normal_styles", "prefix_fractions",
)


class ExperimentConfig(BaseModel):
    """Flat experiment settings; list-valued keys are comma separated in config files."""

    model_config = ConfigDict(extra="forbid")

    # dataset
    dataset: str = "synthetic"
    edge_file: Optional[str] = None
    feature_file: Optional[str] = None
    label_file: Optional[str] = None
    synthetic_nodes: int = Field(100, ge=4)
    synthetic_feature_dim: int = Field(8, ge=2)
    synthetic_p_in: float = Field(0.12, ge=0, le=1)
    synthetic_p_out: float = Field(0.01, ge=0, le=1)
    graph_seed: int = 0

    seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_fraction: float = Field(0.70, gt=0, lt=1)
    val_fraction: float = Field(0.15, gt=0, lt=1)
    test_fraction: float = Field(0.15, gt=0, lt=1)

    # victim and surrogates
    victim_train_fraction: float = Field(0.3, gt=0, le=1)
    victim_hidden_dim: int = Field(16, ge=1)
    victim_epochs: int = Field(200, ge=1)
    victim_learning_rate: float = Field(0.01, gt=0)
    victim_weight_decay: float = Field(0.0005, ge=0)
    surrogate_epochs: int = Field(100, ge=1)

    # attack mix and legitimate users
    strategies: List[Literal["AGE", "GRAIN", "IGP"]] = Field(default_factory=lambda: ["AGE", "GRAIN", "IGP"])
    budgets: List[int] = Field(default_factory=lambda: [35, 70])
    mask_fractions: List[float] = Field(default_factory=lambda: [0.3, 0.5, 0.7])
    attack_repeats: int = Field(6, ge=1)
    grain_gamma: float = Field(1.0, ge=0)
    igp_alpha: float = Field(0.5, ge=0, le=1)
    igp_prefilter_k: int = Field(10, ge=1)
    normal_users: int = Field(100, ge=1)
    normal_min_length: int = Field(20, ge=1)
    normal_max_length: int = Field(60, ge=1)
    normal_styles: List[Literal["random_walk", "random_nodes"]] = Field(
        default_factory=lambda: ["random_walk", "random_nodes"]
    )
    f_hi: float = Field(0.65, ge=0, le=1)
    f_lo: float = Field(0.2, ge=0, le=1)
    short_len: int = Field(20, ge=0)

    # detector and PPO
    lam: float = Field(1.0, ge=0)
    lambda_grid: List[float] = Field(default_factory=lambda: list(LAMBDA_GRID))
    detector_hidden_dim: int = Field(32, ge=1)
    ppo_learning_rate: float = Field(0.003, gt=0)
    clip_eps: float = Field(0.2, gt=0)
    ppo_gamma: float = Field(0.99, ge=0, le=1)
    lambda_gae: float = Field(0.95, ge=0, le=1)
    entropy_coef: float = Field(0.01, ge=0)
    value_coef: float = Field(0.5, ge=0)
    update_epochs: int = Field(4, ge=1)
    episodes: int = Field(60, ge=1)
    batch_users: int = Field(64, ge=1)
    w_tp: float = 1.0
    w_tn: float = 1.0
    w_fp: float = 1.0
    w_fn: float = 2.0
    p_bias: float = 3.0
    bias_fraction_threshold: float = 0.9
    bias_window: int = 64

    # ablations and evaluation
    standard_gru: bool = False
    simple_embeddings: bool = False
    no_mapping_matrix: bool = False
    prefix_fractions: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])

    # analysis
    markov_lambda_s: float = Field(1.0, ge=0)
    markov_lambda_n: float = Field(1.0, ge=0)
    markov_max_lists: int = Field(8, ge=1)
    theory_max_n: int = Field(7, ge=2, le=7)
    theory_weight_draws: int = Field(50, ge=1)
    theory_traces: int = Field(500, ge=1)
    theory_rates: Literal["bounds", "measured"] = "bounds"

    @field_validator(*_LIST_FIELDS, mode="before")
    @classmethod
    def split_comma_list(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("edge_file", "feature_file", "label_file", mode="before")
    @classmethod
    def blank_is_none(cls, value):
        if isinstance(value, str) and not value.strip():
            return None
        return value

    @field_validator("prefix_fractions")
    @classmethod
    def check_prefixes(cls, value: List[float]) -> List[float]:
        if not value or any(not (0 < f <= 1) for f in value):
            raise ValueError("prefix fractions must lie in (0, 1]")
        return value

    @model_validator(mode="after")
    def check_consistency(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if not self.f_lo < self.f_hi:
            raise ValueError("f_lo must be below f_hi")
        if self.normal_min_length > self.normal_max_length:
            raise ValueError("normal_min_length exceeds normal_max_length")
        if self.dataset != "synthetic" and not (self.edge_file and self.feature_file and self.label_file):
            raise ValueError(f"dataset {self.dataset!r} needs edge_file, feature_file and label_file")
        return self


class MetricsRow(BaseModel):
    model: str
    dataset: str
    prefix: float = Field(..., gt=0, le=1)
    seed: Union[int, Literal["median"]]
    f1: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    accuracy: float = Field(..., ge=0, le=1)

    def csv_fields(self) -> Tuple[str, ...]:
        return (
            self.model,
            self.dataset,
            f"{self.prefix:.2f}",
            str(self.seed),
            f"{self.f1:.6f}",
            f"{self.recall:.6f}",
            f"{self.precision:.6f}",
            f"{self.accuracy:.6f}",
        )


class SubgraphView(BaseModel):
    center: int
    members: List[int]
    edges: List[Tuple[int, int]]


class DecisionView(BaseModel):
    user_id: str
    steps: int = Field(0, ge=0)
    action_probs: Optional[List[float]] = None
    decision: Optional[Literal["attacker", "legitimate"]] = None


class QueryResponse(BaseModel):
    node_id: int
    label: int
    probabilities: List[float]
    subgraph: SubgraphView
    monitor: Optional[DecisionView] = None


class FlaggedUsers(BaseModel):
    users: List[DecisionView]


class HealthView(BaseModel):
    ok: bool
    graph_loaded: bool = False
    victim_loaded: bool = False
    detector_loaded: bool = False
    details: Dict[str, str] = Field(default_factory=dict)
