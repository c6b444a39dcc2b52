"""Counterfactual video generation with guided latent diffusion, at toy scale."""

__version__ = "0.1.0"
