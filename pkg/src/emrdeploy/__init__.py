"""Desk-scale deployment loop for clinical ML models over a simulated EMR."""

__version__ = "0.1.0"
