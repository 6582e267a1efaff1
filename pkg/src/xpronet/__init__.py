"""Cross-modal prototype driven report generation, built on a small NumPy autodiff engine."""

__version__ = "0.1.0"
