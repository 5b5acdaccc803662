"""Numerical toolkit for averaging and fluctuation limits of slow/fast systems
driven by one mixing process read at several time scales."""

__version__ = "0.1.0"
