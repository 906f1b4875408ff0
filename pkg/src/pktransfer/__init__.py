"""Multiple-instance survival models and cross-cancer transfer analysis."""

__version__ = "0.1.0"
