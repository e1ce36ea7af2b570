"""Multi-channel mixture-to-mixture separation training on simulated rooms."""

__version__ = "0.1.0"
