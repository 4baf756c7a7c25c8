"""Discretized input/output representations for global neural forecasters."""

__version__ = "0.1.0"
