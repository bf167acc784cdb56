"""Information-bottleneck representation learning for treatment effect estimation."""

__version__ = "0.1.0"
