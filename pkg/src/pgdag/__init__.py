"""Typed loss-function graphs for policy-gradient and Q-learning algorithms."""

__version__ = "0.1.0"
