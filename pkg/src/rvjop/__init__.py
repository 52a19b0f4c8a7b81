"""Jump-oriented programming analysis for RV32I binaries."""
__version__ = "0.1.0"
