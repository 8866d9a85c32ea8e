"""Simulator for beyond-prefix KV-cache reuse in generative recommendation serving."""

__version__ = "0.1.0"
