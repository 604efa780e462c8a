"""Geometry-aware token fusion with shortcut-suppressing masking, at toy scale."""

__version__ = "0.1.0"
