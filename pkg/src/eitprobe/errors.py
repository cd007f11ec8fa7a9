"""Exception types shared across the package."""


class EitProbeError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(EitProbeError):
    """Tank/probe geometry violates a constructive constraint."""


class MeshingError(EitProbeError):
    """Mesh construction failed (degenerate refinement, empty patch, ...)."""


class SingularSystemError(EitProbeError):
    """Forward system cannot be grounded (disconnected mesh or zero pivot)."""


class SolverError(EitProbeError):
    """A linear solve did not meet its residual tolerance."""


class IllConditionedError(EitProbeError):
    """Regularized normal equations could not be factorized."""


class LineSearchError(EitProbeError):
    """Line search failed to find any acceptable step."""


class ProvenanceError(EitProbeError):
    """An artifact was applied to data it was not built from."""


class DimensionError(EitProbeError):
    """Input dimensions do not match a model or operator."""


class SingularGramError(EitProbeError):
    """RBF output solve hit a singular Gram matrix (ridge too small)."""


class DegenerateDataError(EitProbeError):
    """Training inputs are degenerate (e.g. all identical with k > 1)."""


class EmptyImageError(EitProbeError):
    """Thresholding found no voxel of the expected sign."""
