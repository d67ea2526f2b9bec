"""perfmine: mine, containerize, and evaluate performance-improving C++ commits."""

__version__ = "0.1.0"
