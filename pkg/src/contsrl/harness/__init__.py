"""Experiment plumbing: configs, seeding, I/O ledger, CSV metrics, plots and the CLI."""
