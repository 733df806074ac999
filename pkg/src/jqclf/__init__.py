"""Strict control-Lyapunov functions and bounded damping feedback for systems with a stable drift."""

__version__ = "0.1.0"
