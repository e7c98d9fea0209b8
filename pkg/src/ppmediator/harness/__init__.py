"""Experiment driver: hypothesis files, cross-validation, reports and the CLI."""
