"""Differentiable pilot-free, CP-free OFDM link simulator with a learned
constellation, a neural receiver with channel adapters, and conventional
baselines."""

__version__ = "0.1.0"
