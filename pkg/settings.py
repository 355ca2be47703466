# settings.py

import os
import random
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from dotenv import load_dotenv
from loguru import logger

load_dotenv()

# Environment overrides
DETERMINISTIC_ENV = "PREVIEW_DETERMINISTIC"
LOG_LEVEL = os.getenv("PREVIEW_LOG_LEVEL", "INFO")
DEVICE = os.getenv("PREVIEW_DEVICE", "cpu")
RUN_SLOW_TESTS = os.getenv("PREVIEW_RUN_SLOW", "0") == "1"
RECORD_GOLDEN = os.getenv("PREVIEW_RECORD_GOLDEN", "0") == "1"


def deterministic_requested() -> bool:
    """True when PREVIEW_DETERMINISTIC=1 is set in the environment (or .env)."""
    return os.getenv(DETERMINISTIC_ENV, "0").strip() == "1"


def resolve_device(requested: Optional[str] = None) -> torch.device:
    name = requested or DEVICE
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"Device {name} requested but CUDA is unavailable, using cpu")
        name = "cpu"
    return torch.device(name)


def seed_everything(seed: int, deterministic: bool = False):
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def configure_logging(run_dir: Optional[Path] = None, level: str = LOG_LEVEL) -> Optional[int]:
    """Reset the stderr sink and, for a run directory, add a rotating file sink."""
    logger.remove()
    logger.add(sys.stderr, level=level)
    if run_dir is None:
        return None
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    return logger.add(Path(run_dir) / "preview.log", rotation="500 MB", level="DEBUG")
