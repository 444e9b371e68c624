"""Continual state-representation learning: a raycast room environment, a
convolutional VAE kept current by generative replay, Welch-test change
detection, and PPO on top of the learned features."""

__version__ = "0.1.0"
