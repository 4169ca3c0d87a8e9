"""Experiment driver: configuration, array store, pipeline steps and CLI."""
