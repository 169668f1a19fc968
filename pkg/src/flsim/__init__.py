"""Desk-scale simulator of federated instruction tuning with LoRA adapters."""

__version__ = "0.1.0"
