"""Sparse-keypoint to dense body-surface estimation for small deformable bodies.

The package covers the full desk-scale pipeline: canonical-surface
construction, the transformer surface regressor with masked training and
silhouette-based individual adaptation, semi-automatic marker annotation,
keypoint forecasting, and the synthetic capture-dome generator used as the
test oracle.
"""

__version__ = "0.1.0"
