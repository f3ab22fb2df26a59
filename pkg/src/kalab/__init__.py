"""Kob-Andersen lattice gas: exact constraint, tagged-particle KMC, bootstrap and multi-scale diagnostics."""
__version__ = "0.1.0"
