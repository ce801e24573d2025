"""Latent-diffusion obfuscation of labeled sensor time-series.

The package trains a small stack of models (VAE, contrastive public-attribute
encoder, conditional latent diffusion model, auxiliary privacy classifiers),
uses them to regenerate time-series segments that keep a chosen public
attribute while suppressing private ones, and ships the audit machinery
(privacy loss, re-identification, mutual-information tracking, trade-off
sweeps) to measure how well that worked.
"""

__version__ = "0.1.0"

TOOL_VERSION = __version__
