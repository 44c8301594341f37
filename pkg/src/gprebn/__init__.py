"""Test-time batch normalization: gradient-preserving BN, entropy adaptation, rT3A."""
from .kernels import BACKEND

__version__ = "0.1.0"
