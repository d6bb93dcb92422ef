"""Simulator and analysis toolkit for superconducting atom-chip traps."""

__version__ = "0.1.0"
