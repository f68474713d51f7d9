"""Run provenance and determinism controls."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import random
import time
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

import tgdm

logger = logging.getLogger(__name__)


def code_hash() -> str:
    """Content hash of the installed package sources (git blob style, then combined)."""
    root = Path(tgdm.__file__).parent
    outer = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        outer.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode())
    return outer.hexdigest()


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def write_provenance(out_dir, config, seeds: Iterable[int], extra: Optional[dict] = None) -> Path:
    """Write ``config.json`` (resolved) and ``provenance.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")
    record = {
        "version": tgdm.__version__,
        "code_hash": code_hash(),
        "seeds": [int(s) for s in seeds],
        "deterministic": bool(config.deterministic),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    path = out_dir / "provenance.json"
    path.write_text(json.dumps(record, indent=2))
    return path
