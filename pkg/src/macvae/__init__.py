"""Multi-auxiliary coupled VAE engine for item tag recommendation."""

__version__ = "0.1.0"
