"""Neural inverse optimal transport for bilateral trade costs."""

__version__ = "0.1.0"
