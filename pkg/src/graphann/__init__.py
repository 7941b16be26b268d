"""Graph-based approximate nearest-neighbor search with a QPS/recall benchmark kit."""

__version__ = "0.1.0"
