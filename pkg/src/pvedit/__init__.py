"""Training-free video editing controls on a desk-scale diffusion stack."""

__version__ = "0.1.0"
