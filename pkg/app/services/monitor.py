"""
Serving-side state: the loaded graph, victim and detector, plus a live monitor
that folds every API query into its user's detector state.
"""
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch

from app import settings
from app.errors import AtomError, PreconditionError
from app.services.detector import DetectorCheckpoint, DetectorState, embedding_table, fused_step, load_detector
from app.services.graph_core import AttributedGraph, load_graph
from app.services.victim_model import VictimModel, load_victim

logger = logging.getLogger(__name__)

GRAPH_DIR = "graph"
EDGE_FILE = "edges.txt"
FEATURE_FILE = "features.txt"
LABEL_FILE = "labels.txt"
VICTIM_FILE = "victim.atom"
DETECTOR_FILE = "detector.atomdet"

ATTACKER = 1


@dataclass
class UserTrack:
    state: DetectorState
    probs: Optional[torch.Tensor] = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class LiveMonitor:
    """
    Per-user detector states over shared, read-only parameters (argmax decisions).

    At most ``max_users`` states are kept; a new user evicts the one that
    queried least recently.
    """

    def __init__(
        self,
        checkpoint: DetectorCheckpoint,
        g: AttributedGraph,
        victim: VictimModel,
        max_users: Optional[int] = None,
    ):
        if checkpoint.heads is None:
            raise AtomError("detector checkpoint carries no policy head")
        self.max_users = settings.MONITOR_MAX_USERS if max_users is None else max_users
        if self.max_users < 1:
            raise PreconditionError(f"max_users must be positive, got {self.max_users}")
        self.checkpoint = checkpoint
        self.graph = g
        self.table = embedding_table(g, victim, checkpoint.lam)
        self._users: "OrderedDict[str, UserTrack]" = OrderedDict()
        self._registry_lock = threading.Lock()

    def _track(self, user_id: str) -> UserTrack:
        with self._registry_lock:
            track = self._users.get(user_id)
            if track is not None:
                self._users.move_to_end(user_id)
                return track
            while len(self._users) >= self.max_users:
                evicted, old = self._users.popitem(last=False)
                logger.info("Evicted user %s after %d steps (limit %d users)", evicted, old.state.step, self.max_users)
            track = UserTrack(state=DetectorState.initial(self.checkpoint.params))
            self._users[user_id] = track
            return track

    def __len__(self) -> int:
        with self._registry_lock:
            return len(self._users)

    def observe(self, user_id: str, node: int) -> UserTrack:
        v = self.graph.check_node(node)
        track = self._track(user_id)
        with track.lock, torch.no_grad():
            state = fused_step(self.checkpoint.params, track.state, self.table[v])
            state.prev_action_probs = self.checkpoint.heads.policy(state.hidden)
            track.state = state
            track.probs = state.prev_action_probs
        logger.debug("User %s step %d probs %s", user_id, track.state.step, track.probs.tolist())
        return track

    def get(self, user_id: str) -> Optional[UserTrack]:
        with self._registry_lock:
            return self._users.get(user_id)

    def reset(self, user_id: str) -> bool:
        with self._registry_lock:
            return self._users.pop(user_id, None) is not None

    def flagged(self) -> List[str]:
        with self._registry_lock:
            items = list(self._users.items())
        return sorted(uid for uid, t in items if t.probs is not None and int(t.probs.argmax()) == ATTACKER)


def decision_name(track: Optional[UserTrack]) -> Optional[str]:
    if track is None or track.probs is None:
        return None
    return "attacker" if int(track.probs.argmax()) == ATTACKER else "legitimate"


class ServingContext:
    """Artifacts loaded from one directory; anything missing is recorded, not raised."""

    def __init__(self, artifact_dir: Union[str, Path]):
        self.artifact_dir = Path(artifact_dir)
        self.graph: Optional[AttributedGraph] = None
        self.victim: Optional[VictimModel] = None
        self.monitor: Optional[LiveMonitor] = None
        self.problems: Dict[str, str] = {}
        self._load()

    def _load(self) -> None:
        graph_dir = self.artifact_dir / GRAPH_DIR
        try:
            self.graph = load_graph(graph_dir / EDGE_FILE, graph_dir / FEATURE_FILE, graph_dir / LABEL_FILE)
            print(f"[SERVE] Graph loaded: {self.graph.node_count} nodes, {self.graph.edge_count} edges", flush=True)
        except (AtomError, OSError) as e:
            self.problems["graph"] = str(e)
            print(f"[SERVE] ❌ Graph not loaded: {e}", flush=True)
            return
        try:
            self.victim = load_victim(self.artifact_dir / VICTIM_FILE)
            print(f"[SERVE] Victim loaded from {self.artifact_dir / VICTIM_FILE}", flush=True)
        except (AtomError, OSError) as e:
            self.problems["victim"] = str(e)
            print(f"[SERVE] ❌ Victim not loaded: {e}", flush=True)
            return
        detector_path = self.artifact_dir / DETECTOR_FILE
        if not detector_path.exists():
            self.problems["detector"] = f"{detector_path} not found; monitoring disabled"
            print(f"[SERVE] Detector not found at {detector_path}; monitoring disabled", flush=True)
            return
        try:
            self.monitor = LiveMonitor(load_detector(detector_path), self.graph, self.victim)
            print(f"[SERVE] Detector loaded (lambda={self.monitor.checkpoint.lam})", flush=True)
        except (AtomError, OSError) as e:
            self.problems["detector"] = str(e)
            print(f"[SERVE] ❌ Detector not loaded: {e}", flush=True)


_context_instance: Optional[ServingContext] = None


def get_serving_context() -> ServingContext:
    global _context_instance
    if _context_instance is None:
        _context_instance = ServingContext(settings.ARTIFACT_DIR)
    return _context_instance


def set_serving_context(context: Optional[ServingContext]) -> None:
    global _context_instance
    _context_instance = context
