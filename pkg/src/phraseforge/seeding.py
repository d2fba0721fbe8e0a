"""Per-stage, per-item RNG derivation.

Every random stream is ``numpy.random.Generator(PCG64(seed))`` where the seed is
the first 8 bytes of ``sha256("<global_seed>|<stage>|<item>")``.  Streams are
therefore independent of processing order and of the worker that runs them.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(global_seed: int, stage: str, item: object = "") -> int:
    digest = hashlib.sha256(f"{int(global_seed)}|{stage}|{item}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stage_rng(global_seed: int, stage: str, item: object = "") -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(global_seed, stage, item)))
