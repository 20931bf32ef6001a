"""Bayesian sequential matrix completion."""
