"""Multiple-instrument treatment effect estimation under vector monotonicity."""

__version__ = "0.1.0"
