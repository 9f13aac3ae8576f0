"""Transported principal causal effects: estimators of the treatment effect
among compliers in a target population, combining trial and target data."""

__version__ = "0.1.0"
