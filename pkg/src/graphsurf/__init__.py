"""Scene-graph-guided joint camera-pose and SDF-surface optimization.

Desk-scale, fully verifiable: analytic synthetic scenes stand in for real
captures, a trilinear SDF grid with two color heads stands in for MLP
fields, and every gradient is hand-derived and finite-difference checked.
"""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
