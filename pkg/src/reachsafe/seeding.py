"""Deterministic RNG substream derivation.

Every random draw in the library flows from one root seed through named
substreams. A stage re-run in isolation therefore sees exactly the random
state it would have seen inside a full pipeline run, and independent
substreams (ensemble members, rollout epochs, evaluation episodes) can be
consumed in any order without perturbing each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root: int, *labels: object) -> int:
    """Derive a 64-bit seed from a root seed and a path of labels."""
    tag = "/".join(str(part) for part in (root, *labels))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root: int, *labels: object) -> np.random.Generator:
    """Generator for the named substream under ``root``."""
    return np.random.default_rng(child_seed(root, *labels))
