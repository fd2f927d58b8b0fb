"""Model-based policy optimization with branched model rollouts, plus exact tabular bound checks."""

__version__ = "0.1.0"
