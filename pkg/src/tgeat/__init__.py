"""Text-guided environment-aware training for noise-robust SER."""

__version__ = "0.1.0"
