"""Exact diagonalization and quantum-chaos diagnostics for trapped 1D Bose-Bose mixtures."""

__version__ = "0.1.0"
