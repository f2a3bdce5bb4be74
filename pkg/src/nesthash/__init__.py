"""Multi-length supervised hashing with a nested hash layer."""

__version__ = "0.1.0"
