"""Forward-gradient classifier guidance for toy diffusion models."""

__version__ = "0.1.0"
