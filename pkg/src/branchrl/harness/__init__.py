"""Command line, configuration, seeding, metrics files and plots."""
from ..seeding import derive_seed, stream

__all__ = ["derive_seed", "stream"]
