"""PPG-based ten-year cardiovascular risk pipeline and evaluation harness."""

__version__ = "0.1.0"
