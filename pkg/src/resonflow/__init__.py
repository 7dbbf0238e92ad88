"""Renormalization-group computation of resonance energies for an atom coupled to a photon field."""

__version__ = "0.1.0"
