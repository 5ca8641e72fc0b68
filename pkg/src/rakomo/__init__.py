"""Reachability-aware k-order Markov trajectory optimization for a legged manipulator."""

__version__ = "0.1.0"
