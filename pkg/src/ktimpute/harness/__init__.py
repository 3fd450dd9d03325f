"""Experiment configuration, synthetic data, phase orchestration and reports."""
