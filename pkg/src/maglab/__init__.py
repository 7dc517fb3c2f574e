"""Discrete Monge-Ampere gravitation: assignment-projection dynamics and large-deviation checks."""

__version__ = "0.1.0"
# bumped whenever emitted file layouts change
FORMAT_VERSION = 1
