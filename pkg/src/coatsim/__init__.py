"""Synthetic material-coating toolkit: renderer, dataset generator, Photoshop
baselines, per-channel PSNR evaluation and a toy rectified-flow model."""

__version__ = "0.1.0"
