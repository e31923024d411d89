from pathlib import Path

import numpy as np
import pytest

from app import cli
from app.services.attack_sim import write_pool
from app.services.graph_core import load_graph
from app.services.monitor import EDGE_FILE, FEATURE_FILE, GRAPH_DIR, LABEL_FILE, VICTIM_FILE
from app.services.theory_check import REPORT_HEADER
from tests.conftest import make_sequence

SMOKE_CONFIG = str(Path(__file__).resolve().parent.parent / "configs" / "smoke.cfg")


def test_parser_knows_every_command():
    parser = cli.build_parser()
    for name in cli.COMMANDS:
        args = parser.parse_args([name, "--seed", "3", "--out", "x"])
        assert args.command == name and args.seed == 3 and args.out == "x"
    assert parser.parse_args(["evaluate", "--full"]).full is True
    with pytest.raises(SystemExit):
        parser.parse_args(["bogus"])


def test_theory_check_writes_report(tmp_path):
    assert cli.main(["theory-check", "--config", SMOKE_CONFIG, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "theory_report.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert [line.split(",")[0] for line in lines[1:]] == ["theorem1", "prop2", "prop3", "theorem4"]


def test_train_victim_then_markov(tmp_path):
    out = str(tmp_path)
    assert cli.main(["train-victim", "--config", SMOKE_CONFIG, "--out", out]) == 0
    assert (tmp_path / VICTIM_FILE).exists()
    graph_dir = tmp_path / GRAPH_DIR
    g = load_graph(graph_dir / EDGE_FILE, graph_dir / FEATURE_FILE, graph_dir / LABEL_FILE)
    assert g.node_count == 40

    hub = int(np.argmax(g.degrees()))
    a, b = g.neighbors(hub)[:2]
    pool = [
        make_sequence(0, [hub, a, hub], 0),
        make_sequence(1, [b, hub], 0),
        make_sequence(2, [hub], 1),
    ]
    write_pool(pool, tmp_path / cli.POOL_FILE)
    assert cli.main(["markov", "--config", SMOKE_CONFIG, "--out", out]) == 0
    scored = list(tmp_path.glob("markov_*_seed0.csv"))
    assert len(scored) == 1
    lines = scored[0].read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(cli.MARKOV_HEADER)
    assert len(lines) == 4
    assert lines[3] == "2,1,0,0.000000"


def test_missing_artifacts_fail_with_stage(tmp_path, capsys):
    assert cli.main(["evaluate", "--out", str(tmp_path)]) == 2
    assert "[ERROR] load:" in capsys.readouterr().err


def test_bad_config_and_seed(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n", encoding="utf-8")
    assert cli.main(["theory-check", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert cli.main(["theory-check", "--seed", "-1", "--out", str(tmp_path)]) == 2
