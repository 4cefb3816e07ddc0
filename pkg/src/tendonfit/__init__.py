"""Two-stage Bayesian data selection and mixed-effects inference for tendon stress-strain data."""

__version__ = "0.1.0"
