import logging
import os
import random
from pathlib import Path

import numpy as np
import torch
from dotenv import load_dotenv

# Get the project root directory (where .env should be)
project_root = Path(__file__).parent.parent
env_path = project_root / ".env"

# Load .env file from project root
load_dotenv(dotenv_path=env_path)


def _resolve(path_value: str) -> Path:
    path = Path(path_value)
    if not path.is_absolute():
        path = project_root / path
    return path


ARTIFACT_DIR = _resolve(os.getenv("ATOM_ARTIFACT_DIR", "artifacts"))
DATA_DIR = _resolve(os.getenv("ATOM_DATA_DIR", "data"))
LOG_LEVEL = os.getenv("ATOM_LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("ATOM_DEFAULT_SEED", "0"))
MONITOR_MAX_USERS = int(os.getenv("ATOM_MONITOR_MAX_USERS", "10000"))
API_KEY = os.getenv("API_KEY_INTERNAL") or os.getenv("INTERNAL_API_KEY")
CORS_ORIGINS = os.getenv("CORS_ORIGINS", "").split(",") if os.getenv("CORS_ORIGINS") else ["*"]

DTYPE = torch.float64

_logging_configured = False


def configure_logging(level: str = None) -> None:
    """Install one stream handler on the root logger (idempotent)."""
    global _logging_configured
    if _logging_configured:
        return
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    _logging_configured = True


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
