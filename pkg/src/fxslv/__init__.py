"""FX local and stochastic-local volatility calibration with stochastic G1++ rates."""

__version__ = "0.1.0"
