"""Deterministic discrete-event simulator for content-centric networks."""

__version__ = "0.1.0"
