"""Latent world models with a Soft-Hamiltonian transition, numpy only."""

__version__ = "0.1.0"
