"""Closed-loop reachability for neural-network controllers with discrete actions."""

__version__ = "0.1.0"
