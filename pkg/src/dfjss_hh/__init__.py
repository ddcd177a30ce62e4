"""Multitask genetic programming of dispatching rules for dynamic flexible job shops,
with a task-conditioned sequence model used as a mutation operator."""

__version__ = "0.1.0"
