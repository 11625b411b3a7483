"""Desk-scale lab for tracking SHAP explanation drift under continual learning."""

__version__ = "0.1.0"
