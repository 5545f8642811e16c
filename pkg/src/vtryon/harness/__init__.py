"""Synthetic data, metrics, dataset I/O and experiment drivers."""
