"""Isometric immersion learning: an autoencoder plus a soft-dual map whose
pullback metric makes local latent distances match ambient ones."""

__version__ = "0.1.0"
