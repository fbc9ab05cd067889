"""Fused inference for sequential conformal CNN layers.

A run of linear layers and ReSPro activations collapses into one sparse
matrix ``L_M`` and one quadratic form ``Q`` acting on homogeneous inputs.
"""

from .fusion import *  # noqa: F401,F403
from .homogeneous import *  # noqa: F401,F403
from .lowering import *  # noqa: F401,F403
from .netspec import *  # noqa: F401,F403
from .reference import *  # noqa: F401,F403
from .respro import *  # noqa: F401,F403
from . import bench, fusion, homogeneous, lowering, netspec, reference, respro  # noqa: F401

__version__ = "0.1.0"
