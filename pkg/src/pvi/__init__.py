"""Partitioned variational inference engine and federated-learning simulator."""

__version__ = "0.1.0"
