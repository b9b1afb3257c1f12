"""Training lab for debiased recommendation via user-feature balancing."""

__version__ = "0.1.0"
