"""Mean-variance team stochastic games for multi-microgrid energy management."""

__version__ = "0.1.0"
