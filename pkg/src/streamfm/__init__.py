"""Streaming flow-matching speech restoration in the compressed STFT domain."""

__version__ = "0.1.0"
