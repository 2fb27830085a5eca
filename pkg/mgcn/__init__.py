"""mgcn: from-scratch CNN training engine and benchmark for COVID-19 image classification."""

__version__ = "0.1.0"

from .__main__ import main

__all__ = ["main", "__version__"]
