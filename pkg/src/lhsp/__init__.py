"""Local- and holistic-structure preserving single-image super-resolution."""

__version__ = "0.1.0"
