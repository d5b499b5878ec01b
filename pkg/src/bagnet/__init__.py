"""Multi-instance multi-label entity typing and type-aware relation extraction."""
__version__ = "0.1.0"
