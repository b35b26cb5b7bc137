"""Few-shot regression proxy for architecture ranking, discrete proxy search,
and a desk-scale benchmark to validate them against."""

__version__ = "0.1.0"
