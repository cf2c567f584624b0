"""Stage-aware estimation of multi-stage treatment regimes."""

__version__ = "0.1.0"
