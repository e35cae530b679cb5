"""Asymmetric convolution blocks: training, lossless fusion and kernel analysis."""

__version__ = "0.1.0"
