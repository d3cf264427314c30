"""Wearable 3-lead ECG cognitive-load classification with a lead adapter and
progressive fine-tuning."""

__version__ = "0.1.0"
