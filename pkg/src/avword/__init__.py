"""Audiovisual isolated-word recognition on a numpy autograd core."""

__version__ = "0.1.0"
