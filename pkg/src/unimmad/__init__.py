"""Unified multi-modal anomaly detection with a cross mixture-of-experts decoder."""

__version__ = "0.1.0"
