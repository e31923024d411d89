"""
Command-line entry point: ``python -m app.cli <command> --config ... --seed ... --out ...``.

Artifacts written into ``--out`` use the same layout the API loads from
``ATOM_ARTIFACT_DIR`` (graph/, victim.atom, pool.csv, detector.atomdet).
"""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.errors import AtomError, ExperimentStageError, PreconditionError
from app.models import ExperimentConfig
from app.services import harness
from app.services.attack_sim import read_pool, write_pool
from app.services.detector import embedding_table, load_detector, save_detector
from app.services.graph_core import AttributedGraph, load_graph, save_graph
from app.services.markov_model import chain_from_sequences, sequence_log_likelihood
from app.services.monitor import DETECTOR_FILE, EDGE_FILE, FEATURE_FILE, GRAPH_DIR, LABEL_FILE, VICTIM_FILE
from app.services.ppo_trainer import train_detector
from app.services.theory_check import theorem1_exhaustive, trace_sweep, write_report
from app.services.victim_model import VictimModel, load_victim, save_victim, train_victim
from app.settings import DEFAULT_SEED, configure_logging, seed_everything

logger = logging.getLogger(__name__)

POOL_FILE = "pool.csv"
MARKOV_HEADER = ("user_id", "label", "K", "log_prob")


def _load_artifacts(out: Path, need_victim: bool = True):
    graph_dir = out / GRAPH_DIR
    with harness.stage("load"):
        g = load_graph(graph_dir / EDGE_FILE, graph_dir / FEATURE_FILE, graph_dir / LABEL_FILE)
        victim = load_victim(out / VICTIM_FILE) if need_victim else None
    return g, victim


def _pool(args, out: Path, g: AttributedGraph, victim: Optional[VictimModel]):
    path = Path(args.pool) if args.pool else out / POOL_FILE
    with harness.stage("load"):
        return read_pool(path, g, victim)


def _split(cfg: ExperimentConfig, pool, seed: int):
    return harness.stratified_split(pool, (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction), seed)


def cmd_train_victim(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    seed_everything(seed)
    with harness.stage("load"):
        g = harness.load_dataset(cfg)
    with harness.stage("victim"):
        victim = train_victim(g, harness.victim_train_mask(g, cfg.victim_train_fraction, seed),
                              harness.victim_config(cfg, seed))
    graph_dir = out / GRAPH_DIR
    save_graph(g, graph_dir / EDGE_FILE, graph_dir / FEATURE_FILE, graph_dir / LABEL_FILE)
    save_victim(victim, out / VICTIM_FILE)
    print(f"[VICTIM] trained on {len(victim.train_mask)} nodes, saved to {out / VICTIM_FILE}", flush=True)


def cmd_simulate_attacks(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    g, victim = _load_artifacts(out)
    seed_everything(seed)
    with harness.stage("attacks"):
        pool = harness.build_pool(cfg, g, victim, seed)
    write_pool(pool, out / POOL_FILE)
    attackers = sum(s.truth_label for s in pool)
    print(f"[ATTACKS] {len(pool)} users ({attackers} attackers) written to {out / POOL_FILE}", flush=True)


def cmd_train_detector(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    g, victim = _load_artifacts(out)
    pool = _pool(args, out, g, victim)
    train, val, _ = _split(cfg, pool, seed)
    settings = harness.variant_settings(cfg)
    seed_everything(seed)
    tag = harness.config_hash(cfg)
    with harness.stage("detector"):
        result = train_detector(
            train, g, victim, settings["lam"],
            cfg=harness.ppo_config(cfg), reward_cfg=harness.reward_config(cfg), seed=seed, val_pool=val,
            standard_gru=settings["standard_gru"], no_mapping_matrix=settings["no_mapping_matrix"],
            log_path=out / f"training_{tag}_seed{seed}.csv",
        )
    save_detector(result.params, out / DETECTOR_FILE, result.heads, settings["lam"], tag=tag)
    print(f"[DETECTOR] best validation F1 {result.best_val_f1:.4f} at episode {result.best_episode}", flush=True)


def cmd_evaluate(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    if args.full:
        path = harness.run_experiment(cfg, out, seed)
        print(f"[EVALUATE] metrics written to {path}", flush=True)
        return
    g, victim = _load_artifacts(out)
    pool = _pool(args, out, g, victim)
    _, _, test = _split(cfg, pool, seed)
    with harness.stage("load"):
        checkpoint = load_detector(out / DETECTOR_FILE)
    if checkpoint.heads is None:
        raise PreconditionError(f"{out / DETECTOR_FILE} has no policy head")
    with harness.stage("evaluate"):
        rows = harness.prefix_evaluate(
            checkpoint.params, checkpoint.heads, embedding_table(g, victim, checkpoint.lam), test,
            cfg.prefix_fractions, harness.model_tag(cfg), cfg.dataset, seed,
        )
    path = harness.write_metrics_csv(rows, out / f"metrics_{harness.config_hash(cfg)}_seed{seed}.csv")
    for row in rows:
        print(f"[EVALUATE] prefix {row.prefix:.2f}: F1 {row.f1:.4f} recall {row.recall:.4f}", flush=True)
    print(f"[EVALUATE] metrics written to {path}", flush=True)


def cmd_theory_check(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    with harness.stage("theory"):
        reports = [theorem1_exhaustive(cfg.theory_max_n, cfg.theory_weight_draws, seed)]
        reports += list(trace_sweep(cfg.theory_traces, seed, rates=cfg.theory_rates).values())
        path = write_report(reports, out)
    for report in reports:
        print(f"[THEORY] {report.statement}: {report.violations} violations in {report.instances_checked} "
              f"instances", flush=True)
    print(f"[THEORY] report written to {path}", flush=True)


def cmd_markov(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    g, _ = _load_artifacts(out, need_victim=False)
    pool = _pool(args, out, g, None)
    with harness.stage("markov"):
        chain = chain_from_sequences(
            [s for s in pool if s.truth_label == 0], g, cfg.markov_max_lists, cfg.markov_lambda_s, cfg.markov_lambda_n
        )
        rows = [(s.user_id, s.truth_label, s.length - 1, sequence_log_likelihood(chain, s.nodes)) for s in pool]
    path = out / f"markov_{harness.config_hash(cfg)}_seed{seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MARKOV_HEADER)
        for user_id, label, k, log_prob in rows:
            writer.writerow([user_id, label, k, f"{log_prob:.6f}"])
    print(f"[MARKOV] chain J={chain.J} k={chain.k}; {len(rows)} users scored into {path}", flush=True)


def cmd_sweep_lambda(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    path = harness.sweep_lambda(cfg, out)
    print(f"[SWEEP] lambda sweep written to {path}", flush=True)


def cmd_ablate(cfg: ExperimentConfig, seed: int, out: Path, args) -> None:
    path = harness.ablate(cfg, out)
    print(f"[ABLATE] ablation table written to {path}", flush=True)


COMMANDS = {
    "train-victim": (cmd_train_victim, "Train the victim GCN and save graph plus checkpoint"),
    "simulate-attacks": (cmd_simulate_attacks, "Simulate attackers and legitimate users into a pool file"),
    "train-detector": (cmd_train_detector, "Train the detector with PPO on the pool's training split"),
    "evaluate": (cmd_evaluate, "Prefix-time evaluation on the test split"),
    "theory-check": (cmd_theory_check, "Check the coverage bounds and write a violation report"),
    "markov": (cmd_markov, "Score every pooled user under the legitimate-behavior chain"),
    "sweep-lambda": (cmd_sweep_lambda, "Multi-seed sweep over the scaling factor lambda"),
    "ablate": (cmd_ablate, "Multi-seed ablation of the detector components"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat key = value experiment config")
    common.add_argument("--seed", type=int, default=None, help="Seed (default: config seed or ATOM_DEFAULT_SEED)")
    common.add_argument("--out", default="artifacts", help="Output directory (default: artifacts)")

    parser = argparse.ArgumentParser(prog="atom", description="Model-extraction attack simulation and detection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("train-detector", "evaluate", "markov"):
            p.add_argument("--pool", default=None, help="Pool file (default: <out>/pool.csv)")
        if name == "evaluate":
            p.add_argument("--full", action="store_true", help="Run the whole pipeline end to end")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        cfg = harness.load_config(args.config)
        seed = args.seed if args.seed is not None else (cfg.seed if args.config else DEFAULT_SEED)
        if seed < 0:
            raise PreconditionError(f"seed must be non-negative, got {seed}")
        cfg = cfg.model_copy(update={"seed": seed})
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](cfg, seed, out, args)
    except ExperimentStageError as e:
        print(f"[ERROR] {e.stage}: {e.cause}", file=sys.stderr, flush=True)
        return 2
    except AtomError as e:
        print(f"[ERROR] {args.command}: {e}", file=sys.stderr, flush=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
