"""Discriminative visual-dialog engine: answer and follow-up-question ranking."""

__version__ = "0.1.0"
