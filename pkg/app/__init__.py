"""DiD structural nested mean models under cluster and network interference."""

__version__ = "0.1.0"
