"""Desk-scale federated ensemble classification framework.

Four toy architectures trained from scratch on a hand-written tensor engine,
soft-voting fusion of their per-class probabilities, and an accuracy-based
federated selection-and-promotion protocol with a bit-exact wire format.
"""

from .errors import FedFusionError

__version__ = "0.1.0"

__all__ = ["FedFusionError", "__version__"]
