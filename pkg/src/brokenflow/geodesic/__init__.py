"""Geodesic and Jacobi flows plus ground-truth oracles."""
from .flow import *  # noqa
