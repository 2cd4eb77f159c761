"""Federated training of a camera-PPG regressor with signal-quality weighted aggregation."""

__version__ = "0.1.0"
