"""Open-domain 3D EIT around a multi-ring probe.

Forward simulation on graded tetrahedral meshes (complete electrode model),
one-step regularized linear reconstruction, TV-regularized interior-point
reconstruction, RBF-network inversion, and voxel-space image metrics.
"""

__version__ = "0.1.0"
