"""Datasets, scenarios, experiment orchestration and configuration."""
