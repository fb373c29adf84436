"""Sentence-level CNN text classification toolkit."""

__version__ = "0.1.0"
