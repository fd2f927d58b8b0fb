"""Seed derivation for the harness (shared with the library)."""
from ..seeding import derive_seed, stream

__all__ = ["derive_seed", "stream"]
