"""Predictive network scheduling with reliable delay forecasts, and delay-aware distributed robust MPC."""

__version__ = "0.1.0"
