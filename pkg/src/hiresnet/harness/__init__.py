"""Training harness: optimizer, schedule, synthetic data, metrics,
checkpointing, training loop, and the command-line interface."""
