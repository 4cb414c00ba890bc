"""Benchmark framework for multimodal active learning on pitfall-isolating datasets."""

__version__ = "0.1.0"
