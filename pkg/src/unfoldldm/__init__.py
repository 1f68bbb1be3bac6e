"""Deep-unfolding blind image restoration with a compact latent diffusion prior."""

__version__ = "0.1.0"
