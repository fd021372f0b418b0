"""Tempered-posterior deep image prior reconstruction with Bayesian hyperparameter tuning."""

__version__ = "0.1.0"
