"""Micro-serving simulator for multi-model diffusion workflows."""

__version__ = "0.1.0"
