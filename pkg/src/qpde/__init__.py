"""qpde: train, quantize, rescale, and cost-profile neural PDE surrogates."""

from . import engine, spectral  # noqa: F401

__version__ = "0.1.0"
