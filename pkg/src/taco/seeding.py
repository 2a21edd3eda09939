"""Named random substreams.

All randomness in the package flows from a single integer seed. Components
derive independent generators from it by name (e.g. ``substream(7, "gen",
"demo", 17)``), so any stage can be re-run in isolation and still reproduce
the exact draws of a full run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *path) -> int:
    """Map (seed, name parts) to a stable 64-bit integer."""
    key = f"{int(seed)}#" + "/".join(str(p) for p in path)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Independent generator for the named stream under ``seed``."""
    return np.random.default_rng(derive_seed(seed, *path))
