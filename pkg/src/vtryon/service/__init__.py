"""HTTP service around the try-on pipeline."""

from .app import create_app

__all__ = ["create_app"]
