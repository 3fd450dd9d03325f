"""Generation and imputation of missing time steps in longitudinal subject data."""

__version__ = "0.1.0"
