"""Coordination-by-shared-log: protocol engine, deterministic cluster
simulator, and invariant verifier."""

__version__ = "0.1.0"
