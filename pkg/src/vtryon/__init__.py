"""Multi-garment virtual try-on with a fusion diffusion transformer, at desk scale."""

__version__ = "0.1.0"
