"""Extremum flow matching and goal-conditioned flow agents."""

__version__ = "0.1.0"
