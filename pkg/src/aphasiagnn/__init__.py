"""Multimodal aphasia-type classification with a speech-gesture graph."""

__version__ = "0.1.0"
