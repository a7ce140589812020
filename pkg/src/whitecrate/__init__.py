"""White-box CRATE transformer engine: sparse rate reduction, derived layers, training."""

__version__ = "0.1.0"
