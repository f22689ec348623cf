"""Boundary-data reconstruction of Riemannian manifolds from broken geodesic travel times."""
from . import errors
from .errors import BrokenFlowError
from .manifold import ManifoldSpec, catalog

__version__ = "0.1.0"
__all__ = ["BrokenFlowError", "ManifoldSpec", "catalog", "errors", "__version__"]
