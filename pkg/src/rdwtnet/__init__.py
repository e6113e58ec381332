"""Trainable rationally-dilated wavelet front end with a compact
CNN / grouped-query-attention / TCN classifier, built on a small
numpy-backed reverse-mode autodiff engine."""

__version__ = "0.1.0"
