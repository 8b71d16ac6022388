"""Missing-value robust spatio-temporal forecasting on station graphs."""

__version__ = "0.1.0"
