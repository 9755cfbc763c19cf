"""Cross-view object-centric retrieval with information-theoretic regularizers."""

__version__ = "0.1.0"
