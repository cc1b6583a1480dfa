"""Incremental structure-from-motion with horizontal geolocation priors.

Reconstructs geo-referenced 6-DoF camera poses and sparse 3D structure from
precomputed feature correspondences, optionally constrained by per-image
horizontal position/yaw priors from cross-view localization, and evaluates
pose accuracy, coverage, and reprojection quality.
"""

__version__ = "0.1.0"
