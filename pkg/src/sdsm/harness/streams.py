"""Counter-based random number streams.

Sub-streams are derived by hashing (master seed, label) into a Philox key, so
any worker can reconstruct its stream independently of scheduling order and
two distinct labels can never collide.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np


def stream_key(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{master_seed}|{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def child_stream(master_seed: int, label: str) -> np.random.Generator:
    """Deterministic generator for one (seed, label) pair."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, label)))


def rng_streams(master_seed: int, labels: Sequence[str]) -> dict[str, np.random.Generator]:
    """One independent generator per label; labels must be unique."""
    labels = list(labels)
    if len(set(labels)) != len(labels):
        raise ValueError("stream labels must be unique")
    return {lab: child_stream(master_seed, lab) for lab in labels}
