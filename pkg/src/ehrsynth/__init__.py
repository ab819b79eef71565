"""Synthetic longitudinal patient-record generation and evaluation."""

__version__ = "0.1.0"
