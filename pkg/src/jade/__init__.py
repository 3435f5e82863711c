"""Joint-aware latent autoencoder and cascaded diffusion for articulated bodies."""

__version__ = "0.1.0"
