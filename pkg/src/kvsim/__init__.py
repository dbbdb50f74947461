"""Deterministic simulator of a paged-KV continuous-batching serving node,
plus the adversarial client stack needed to stress its scheduler."""

__version__ = "0.1.0"
