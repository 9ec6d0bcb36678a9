"""Paced load generation, latency logging and delivery verification for event buses."""

__version__ = "0.1.0"
