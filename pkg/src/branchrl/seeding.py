"""Stable per-stream seeds derived from one master seed."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, stream_label: str) -> int:
    """64-bit seed from ``(master, label)``; identical on every platform."""
    h = hashlib.blake2b(f"{int(master)}\x1f{stream_label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stream(master: int, stream_label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stream_label))
