"""Part decomposition, joint estimation and latent interpolation for multi-state
3D Gaussian fields, with a synthetic ground-truth generator."""

__version__ = "0.1.0"
