"""
Experiment orchestration: config files, the end-to-end pipeline, prefix-time
evaluation, lambda sweeps, ablations and metrics CSVs.
"""
import csv
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from statistics import median
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from app.errors import ConfigError, ExperimentStageError, PreconditionError
from app.models import METRICS_HEADER, ExperimentConfig, MetricsRow
from app.services.attack_sim import (
    Origin,
    QuerySequence,
    label_and_pool,
    simulate_attacks,
    simulate_normals,
    write_pool,
)
from app.services.detector import embedding_table, save_detector
from app.services.graph_core import AttributedGraph, load_graph, synthetic_two_community
from app.services.ppo_trainer import PPOConfig, RewardConfig, TrainResult, step_decisions, train_detector
from app.services.victim_model import VictimModel, VictimTrainConfig, save_victim, train_victim
from app import settings
from app.settings import seed_everything

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ABLATIONS = ("standard_gru", "no_mapping_matrix", "simple_embeddings")


def load_config(path: Optional[PathLike] = None, **overrides) -> ExperimentConfig:
    """Parse a flat ``key = value`` file; unknown keys and bad values raise ConfigError."""
    values: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigError("missing value", key=key)
            values[key.strip()] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ())) or None
        raise ConfigError(first.get("msg", str(e)), key=key)


def config_hash(cfg: ExperimentConfig) -> str:
    """First 12 hex chars of sha256 over the canonical JSON dump (seed excluded)."""
    canonical = json.dumps(cfg.model_dump(mode="json", exclude={"seed"}), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def metrics(predictions: Sequence[int], truths: Sequence[int]) -> Dict[str, float]:
    """Binary F1/recall/precision/accuracy with attackers as the positive class; undefined ratios are 0."""
    predictions, truths = np.asarray(predictions, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise PreconditionError(f"{predictions.size} predictions for {truths.size} truths")
    if predictions.size == 0:
        raise PreconditionError("cannot score an empty prediction list")
    precision, recall, f1, _ = precision_recall_fscore_support(
        truths, predictions, average="binary", pos_label=1, zero_division=0
    )
    return {
        "f1": float(f1),
        "recall": float(recall),
        "precision": float(precision),
        "accuracy": float(accuracy_score(truths, predictions)),
    }


def stratified_split(
    pool: Sequence[QuerySequence],
    fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> Tuple[List[QuerySequence], List[QuerySequence], List[QuerySequence]]:
    """Per-label shuffle and cut; each part is within one user of exact stratification."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise PreconditionError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: Tuple[List, List, List] = ([], [], [])
    for label in sorted({s.truth_label for s in pool}):
        members = [s for s in pool if s.truth_label == label]
        order = rng.permutation(len(members))
        n_train = int(math.floor(len(members) * fractions[0] + 0.5))
        n_val = min(int(math.floor(len(members) * fractions[1] + 0.5)), len(members) - n_train)
        cuts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
        for part, idx in zip(parts, cuts):
            part.extend(members[i] for i in idx)
    return tuple(sorted(part, key=lambda s: s.user_id) for part in parts)


def prefix_step(length: int, rho: float) -> int:
    """1-based step whose decision labels a user at prefix fraction rho."""
    if not (0 < rho <= 1):
        raise PreconditionError(f"prefix fraction must lie in (0, 1], got {rho}")
    return max(1, math.ceil(rho * length - 1e-9))


def prefix_evaluate(
    params,
    heads,
    table,
    test_pool: Sequence[QuerySequence],
    fractions: Sequence[float],
    model: str = "atom",
    dataset: str = "synthetic",
    seed: Union[int, str] = 0,
) -> List[MetricsRow]:
    if not test_pool:
        raise PreconditionError("empty test pool")
    decisions = step_decisions(params, heads, table, test_pool)
    truths = [s.truth_label for s in test_pool]
    rows = []
    for rho in fractions:
        predictions = [int(d[prefix_step(len(d), rho) - 1]) for d in decisions]
        rows.append(MetricsRow(model=model, dataset=dataset, prefix=rho, seed=seed, **metrics(predictions, truths)))
    return rows


@contextmanager
def stage(name: str) -> Iterator[None]:
    print(f"[{name.upper()}] starting", flush=True)
    try:
        yield
    except ExperimentStageError:
        raise
    except Exception as e:
        logger.exception("Stage %s failed", name)
        raise ExperimentStageError(name, e) from e
    print(f"[{name.upper()}] done", flush=True)


@dataclass
class ExperimentData:
    cfg: ExperimentConfig
    seed: int
    graph: AttributedGraph
    victim: VictimModel
    pool: List[QuerySequence]
    train: List[QuerySequence]
    val: List[QuerySequence]
    test: List[QuerySequence]


def resolve_data_path(value: Optional[PathLike]) -> Optional[Path]:
    """Paths that exist as given are used directly; others are looked up under ``DATA_DIR``."""
    if value is None:
        return None
    path = Path(value)
    if path.is_absolute() or path.exists():
        return path
    return settings.DATA_DIR / path


def load_dataset(cfg: ExperimentConfig) -> AttributedGraph:
    if cfg.edge_file:
        return load_graph(
            resolve_data_path(cfg.edge_file), resolve_data_path(cfg.feature_file), resolve_data_path(cfg.label_file)
        )
    return synthetic_two_community(
        node_count=cfg.synthetic_nodes,
        feature_dim=cfg.synthetic_feature_dim,
        p_in=cfg.synthetic_p_in,
        p_out=cfg.synthetic_p_out,
        seed=cfg.graph_seed,
    )


def victim_train_mask(g: AttributedGraph, fraction: float, seed: int) -> List[int]:
    """Per-class random share of nodes used to train the victim."""
    rng = np.random.default_rng(seed)
    mask = []
    for c in range(g.class_count):
        members = np.flatnonzero(g.labels == c)
        if members.size:
            take = max(1, int(round(fraction * members.size)))
            mask.extend(int(v) for v in rng.choice(members, size=take, replace=False))
    return sorted(mask)


def victim_config(cfg: ExperimentConfig, seed: int) -> VictimTrainConfig:
    return VictimTrainConfig(
        hidden_dim=cfg.victim_hidden_dim,
        learning_rate=cfg.victim_learning_rate,
        weight_decay=cfg.victim_weight_decay,
        epochs=cfg.victim_epochs,
        seed=seed,
    )


def build_pool(cfg: ExperimentConfig, g: AttributedGraph, victim: VictimModel, seed: int) -> List[QuerySequence]:
    surrogate_cfg = victim_config(cfg, seed).model_copy(update={"epochs": cfg.surrogate_epochs})
    attacks = simulate_attacks(
        g, victim,
        mask_fractions=cfg.mask_fractions,
        budgets=cfg.budgets,
        strategies=[Origin(s) for s in cfg.strategies],
        repeats=cfg.attack_repeats,
        seed=seed,
        surrogate_config=surrogate_cfg,
        gamma=cfg.grain_gamma,
        alpha=cfg.igp_alpha,
        prefilter_k=cfg.igp_prefilter_k,
    )
    normals = simulate_normals(
        g, victim, cfg.normal_users, (cfg.normal_min_length, cfg.normal_max_length), cfg.normal_styles, seed
    )
    pool = label_and_pool(attacks, normals, cfg.f_hi, cfg.f_lo, cfg.short_len, seed)
    if len({s.truth_label for s in pool}) < 2:
        raise PreconditionError(
            "pool holds a single label; raise budgets or mask fractions so some attacks pass the fidelity gate"
        )
    return pool


def build_data(cfg: ExperimentConfig, seed: int, out_dir: Optional[PathLike] = None) -> ExperimentData:
    """Graph, victim, labeled pool and split for one seed."""
    seed_everything(seed)
    with stage("load"):
        g = load_dataset(cfg)
    with stage("victim"):
        victim = train_victim(g, victim_train_mask(g, cfg.victim_train_fraction, seed), victim_config(cfg, seed))
    with stage("attacks"):
        pool = build_pool(cfg, g, victim, seed)
    with stage("split"):
        train, val, test = stratified_split(
            pool, (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction), seed
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        tag = f"{config_hash(cfg)}_seed{seed}"
        save_victim(victim, out_dir / f"victim_{tag}.atom")
        write_pool(pool, out_dir / f"pool_{tag}.csv")
    return ExperimentData(cfg, seed, g, victim, pool, train, val, test)


def ppo_config(cfg: ExperimentConfig) -> PPOConfig:
    return PPOConfig(
        hidden_dim=cfg.detector_hidden_dim,
        learning_rate=cfg.ppo_learning_rate,
        clip_eps=cfg.clip_eps,
        gamma=cfg.ppo_gamma,
        lambda_gae=cfg.lambda_gae,
        entropy_coef=cfg.entropy_coef,
        value_coef=cfg.value_coef,
        update_epochs=cfg.update_epochs,
        episodes=cfg.episodes,
        batch_users=cfg.batch_users,
    )


def reward_config(cfg: ExperimentConfig) -> RewardConfig:
    try:
        return RewardConfig(
            w_tp=cfg.w_tp, w_tn=cfg.w_tn, w_fp=cfg.w_fp, w_fn=cfg.w_fn, p_bias=cfg.p_bias,
            bias_fraction_threshold=cfg.bias_fraction_threshold, bias_window=cfg.bias_window,
        )
    except ValidationError as e:
        raise ConfigError(e.errors()[0].get("msg", str(e)), key="rewards")


def variant_settings(cfg: ExperimentConfig, variant: Optional[str] = None, lam: Optional[float] = None) -> Dict:
    """Detector flags and lambda for the full model or one ablation."""
    settings = {
        "standard_gru": cfg.standard_gru,
        "no_mapping_matrix": cfg.no_mapping_matrix,
        "lam": 0.0 if cfg.simple_embeddings else (cfg.lam if lam is None else lam),
    }
    if variant == "standard_gru":
        settings["standard_gru"] = True
    elif variant == "no_mapping_matrix":
        settings["no_mapping_matrix"] = True
    elif variant == "simple_embeddings":
        settings["lam"] = 0.0
    elif variant is not None:
        raise PreconditionError(f"unknown ablation {variant!r}")
    return settings


def train_and_evaluate(
    data: ExperimentData,
    model: str = "atom",
    variant: Optional[str] = None,
    lam: Optional[float] = None,
    out_dir: Optional[PathLike] = None,
) -> Tuple[TrainResult, List[MetricsRow]]:
    cfg, seed = data.cfg, data.seed
    settings = variant_settings(cfg, variant, lam)
    seed_everything(seed)
    tag = f"{config_hash(cfg)}_seed{seed}_{model}"
    with stage("detector"):
        result = train_detector(
            data.train, data.graph, data.victim, settings["lam"],
            cfg=ppo_config(cfg), reward_cfg=reward_config(cfg), seed=seed, val_pool=data.val,
            standard_gru=settings["standard_gru"], no_mapping_matrix=settings["no_mapping_matrix"],
            log_path=None if out_dir is None else Path(out_dir) / f"training_{tag}.csv",
        )
    with stage("evaluate"):
        table = embedding_table(data.graph, data.victim, settings["lam"])
        rows = prefix_evaluate(
            result.params, result.heads, table, data.test, cfg.prefix_fractions, model, cfg.dataset, seed
        )
    if out_dir is not None:
        save_detector(result.params, Path(out_dir) / f"detector_{tag}.atomdet", result.heads,
                      settings["lam"], tag=config_hash(cfg))
    return result, rows


def write_metrics_csv(rows: Sequence[MetricsRow], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.csv_fields())
    return path


def read_metrics_csv(path: PathLike) -> List[MetricsRow]:
    with Path(path).open("r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricsRow(
                model=r["model"], dataset=r["dataset"], prefix=float(r["prefix"]),
                seed=r["seed"] if r["seed"] == "median" else int(r["seed"]),
                f1=float(r["f1"]), recall=float(r["recall"]),
                precision=float(r["precision"]), accuracy=float(r["accuracy"]),
            )
            for r in reader
        ]


def median_rows(rows: Sequence[MetricsRow]) -> List[MetricsRow]:
    """One row per (model, dataset, prefix) holding the per-metric median over seeds."""
    groups: Dict[Tuple[str, str, float], List[MetricsRow]] = {}
    for row in rows:
        groups.setdefault((row.model, row.dataset, row.prefix), []).append(row)
    out = []
    for (model, dataset, prefix), members in groups.items():
        out.append(MetricsRow(
            model=model, dataset=dataset, prefix=prefix, seed="median",
            **{m: float(median(getattr(r, m) for r in members)) for m in ("f1", "recall", "precision", "accuracy")},
        ))
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: PathLike, seed: Optional[int] = None) -> Path:
    """Full pipeline for one seed; returns the metrics CSV path."""
    seed = cfg.seed if seed is None else seed
    out_dir = Path(out_dir)
    data = build_data(cfg, seed, out_dir)
    model = model_tag(cfg)
    _, rows = train_and_evaluate(data, model=model, out_dir=out_dir)
    path = write_metrics_csv(rows, out_dir / f"metrics_{config_hash(cfg)}_seed{seed}.csv")
    logger.info("Metrics written to %s", path)
    return path


def model_tag(cfg: ExperimentConfig) -> str:
    active = [name for name in ABLATIONS if getattr(cfg, name)]
    return "+".join(active) if active else "atom"


def _multi_seed(
    cfg: ExperimentConfig,
    out_dir: PathLike,
    variants: Sequence[Tuple[str, Optional[str], Optional[float]]],
    name: str,
) -> Path:
    rows: List[MetricsRow] = []
    for seed in cfg.seeds:
        data = build_data(cfg, seed, out_dir)
        for model, variant, lam in variants:
            _, seed_rows = train_and_evaluate(data, model=model, variant=variant, lam=lam, out_dir=out_dir)
            rows.extend(seed_rows)
    rows = sorted(rows, key=lambda r: (r.model, r.prefix, r.seed)) + sorted(
        median_rows(rows), key=lambda r: (r.model, r.prefix)
    )
    return write_metrics_csv(rows, Path(out_dir) / f"{name}_{config_hash(cfg)}.csv")


def sweep_lambda(cfg: ExperimentConfig, out_dir: PathLike) -> Path:
    variants = [(f"atom_lambda={lam:g}", None, lam) for lam in cfg.lambda_grid]
    return _multi_seed(cfg, out_dir, variants, "sweep_lambda")


def ablate(cfg: ExperimentConfig, out_dir: PathLike) -> Path:
    variants = [("atom", None, None)] + [(name, name, None) for name in ABLATIONS]
    return _multi_seed(cfg, out_dir, variants, "ablation")


__all__ = [
    "ExperimentData",
    "ablate",
    "build_data",
    "config_hash",
    "load_config",
    "median_rows",
    "metrics",
    "prefix_evaluate",
    "prefix_step",
    "run_experiment",
    "stratified_split",
    "sweep_lambda",
    "train_and_evaluate",
    "write_metrics_csv",
]
