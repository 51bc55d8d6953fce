"""Config, training, evaluation, checkpoints and the command-line entry point."""
