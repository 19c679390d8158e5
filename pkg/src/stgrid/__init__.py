"""Grid-based spatio-temporal propagation for multi-view video editing."""

__version__ = "0.1.0"
