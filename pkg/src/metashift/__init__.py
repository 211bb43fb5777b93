"""Meta-learning under data shift on synthetic seismic classification tasks."""

__version__ = "0.1.0"
