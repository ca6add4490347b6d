"""Network width search with locally free weight sharing."""

__version__ = "0.1.0"
