"""Model-based robust training under natural corruptions, with a benchmark harness."""

__version__ = "0.1.0"
