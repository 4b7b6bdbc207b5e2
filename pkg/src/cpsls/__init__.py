"""Conformally calibrated learned-dynamics error sets for SLS robust tube MPC."""

__version__ = "0.1.0"
