"""Loss-oriented pairwise ranking engine for visual prompt retrieval."""

__version__ = "0.1.0"
