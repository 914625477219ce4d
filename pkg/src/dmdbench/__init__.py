"""Delayed mirror descent on stochastic congestion games under feedback-delay attacks."""

__version__ = "0.1.0"
