"""Two-party privacy-preserving image registration.

Party 1 holds the moving image and runs the optimizer; party 2 holds the
fixed image. Every product that touches the fixed image goes through a
session backend: in the clear, additive secret sharing, or packed CKKS.
"""
from .image import Image
from .optimizer import OptimizerConfig, RegistrationResult, register
from .protocols import SessionConfig, establish_session
from .transforms import AffineTransform, BSplineTransform

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "BSplineTransform",
    "Image",
    "OptimizerConfig",
    "RegistrationResult",
    "SessionConfig",
    "establish_session",
    "register",
]
