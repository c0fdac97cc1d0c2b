"""Staged multimodal conditioning for enzyme-kinetics regression."""

__version__ = "0.1.0"
