"""Rational, arbitrated text anonymization with marginal-cost accounting."""

__version__ = "0.1.0"
