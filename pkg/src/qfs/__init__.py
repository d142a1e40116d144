"""Simulation of deterministic remote-entanglement protocols with measurement feedback."""

__version__ = "0.1.0"
