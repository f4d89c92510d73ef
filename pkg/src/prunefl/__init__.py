"""Federated learning with adaptive parameter pruning.

Submodules: ``sparse`` (sparse storage), ``nn`` (masked networks and
backprop), ``cost`` (round-time model), ``pruner`` (reconfiguration
solvers), ``fl`` (clients, server, rounds), ``data``, ``harness`` and
``cli``.
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
