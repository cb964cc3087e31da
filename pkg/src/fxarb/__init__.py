"""Graph learning for FX rate prediction and constraint-guaranteed statistical arbitrage."""

__version__ = "0.1.0"
