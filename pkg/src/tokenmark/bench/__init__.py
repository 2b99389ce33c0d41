"""Experiment harness: dataset, checkpoints, config, pipeline and CLI."""
