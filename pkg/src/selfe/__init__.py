"""Self-evaluating any-step generative model on synthetic 2-D data."""

__version__ = "0.1.0"
