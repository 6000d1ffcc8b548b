"""Counterfactual stress testing for image classifiers."""

__version__ = "0.1.0"

from cfstress.errors import CfStressError, ConfigError, DataError, NumericError  # noqa: E402

__all__ = ["CfStressError", "ConfigError", "DataError", "NumericError", "__version__"]
