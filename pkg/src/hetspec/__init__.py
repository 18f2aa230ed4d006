"""Joint spectrum allocation and association for two-RAT heterogeneous networks."""

__version__ = "0.1.0"
