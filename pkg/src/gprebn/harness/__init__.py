"""Experiment harness: config, method cells, ablations, sweeps, reports and the CLI."""
