"""Write a seeded two-community graph in the edge/feature/label file formats."""
import argparse
from pathlib import Path

from app.services.graph_core import save_graph, synthetic_two_community
from app.settings import DATA_DIR


def main() -> int:
    parser = argparse.ArgumentParser(description="Generate a synthetic two-community attributed graph")
    parser.add_argument("--nodes", type=int, default=100)
    parser.add_argument("--features", type=int, default=8)
    parser.add_argument("--p-in", type=float, default=0.12)
    parser.add_argument("--p-out", type=float, default=0.01)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=str(DATA_DIR / "synthetic"))
    args = parser.parse_args()

    g = synthetic_two_community(args.nodes, args.features, args.p_in, args.p_out, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / "edges.txt", out / "features.txt", out / "labels.txt")
    print(f"[SYNTHETIC] n={g.node_count} m={g.edge_count} written to {out}", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
