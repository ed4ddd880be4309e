"""Bayesian estimation of vaccine- and infection-induced seroprevalence by country."""

__version__ = "0.1.0"
