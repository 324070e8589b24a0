"""Self-supervised embeddings and shallow detectors for tabular anomaly detection."""

__version__ = "0.1.0"
