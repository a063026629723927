"""Laughter-based speaker verification with two-stage teacher-student training."""

__version__ = "0.1.0"
