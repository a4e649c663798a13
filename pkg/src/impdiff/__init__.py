"""Class-conditional diffusion models trained from imprecise labels, on analytic Gaussian mixtures."""

__version__ = "0.1.0"
