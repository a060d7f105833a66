"""Ride-mode telemetry: trip features, rider panels, simulated-ML logit and fixed-effects DiD."""

__version__ = "0.1.0"
