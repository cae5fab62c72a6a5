"""Training, evaluation, and command-line entry points."""
