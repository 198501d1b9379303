"""Data-flow platform for heterogeneous marine in-situ sensor streams."""

__version__ = "0.1.0"
