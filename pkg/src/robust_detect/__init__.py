"""Minimax robust detection: least favorable distributions, robust
likelihood-ratio tests and minimax sequential tests on 1-D grids."""

__version__ = "0.1.0"
