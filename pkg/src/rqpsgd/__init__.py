"""Differentially private training of quantized linear models by randomized quantization projection."""

__version__ = "0.1.0"
