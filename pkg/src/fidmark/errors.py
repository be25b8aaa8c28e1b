"""Exceptions raised by the library.

Each error names the contract it guards; modules raise these instead of
letting numpy errors or silent NaNs escape.
"""


class FidmarkError(Exception):
    """Base class for all library errors."""


class CountMismatch(FidmarkError):
    """Paired sequences disagree in length."""


class CollinearCorrespondences(FidmarkError):
    """Source points of an alignment problem are collinear (rank < 2)."""


class SingularCovariance(FidmarkError):
    """Covariance matrix is not positive definite within tolerance."""


class EmptyCloud(FidmarkError):
    """Operation requires a non-empty point cloud."""


class RankDeficient(FidmarkError):
    """Linear system has a rank-deficient design matrix."""


class DegenerateCluster(FidmarkError):
    """Cluster has too few points to define a bounding box."""


class OutOfBounds(FidmarkError):
    """Pixel coordinate lies outside the image."""


class NoSymmetricPair(FidmarkError):
    """No observed symmetric pixel pair found within the search window."""


class NoObservations(FidmarkError):
    """No marker observations available to build a graph from."""


class MissingInitial(FidmarkError):
    """A graph variable has no initial value."""


class IllPosedGraph(FidmarkError):
    """Factor graph lacks a prior or contains unconstrained variables."""


class NonFiniteCost(FidmarkError):
    """Optimization cost evaluated to NaN or infinity."""


class DisconnectedInput(FidmarkError):
    """Some scans share no marker chain with the anchor scan."""


class LengthMismatch(FidmarkError):
    """Estimate and ground-truth sequences disagree in length."""
