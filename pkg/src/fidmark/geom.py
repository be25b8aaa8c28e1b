"""Rigid-body geometry: SO(3)/SE(3) primitives and point-set alignment.

Rotations are 3x3 orthonormal matrices, poses are (R, t) pairs, and all
operations are plain numpy. Rotation vectors use the axis-angle convention
with magnitude equal to the rotation angle in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollinearCorrespondences, CountMismatch, SingularCovariance

# Below this angle (rad) the log/exp series are evaluated by their limits.
SMALL_ANGLE = 1e-10
# Within this margin of pi the log switches to eigenvector axis extraction,
# where the 1/(2 sin theta) form loses precision.
NEAR_PI_MARGIN = 1e-6
# Second singular value below this (relative to the largest) means the
# alignment source points are collinear.
COLLINEAR_RTOL = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat; takes the skew part coordinates of a 3x3 matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix for an axis-angle vector."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec)
    k = hat(rotvec)
    if theta < SMALL_ANGLE:
        # First-order expansion; second-order term keeps orthonormality
        # to machine precision for tiny but nonzero angles.
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix.

    The angle comes from the trace, theta = arccos((trace - 1) / 2), and the
    axis from the skew part of R scaled by theta / (2 sin theta). Two regimes
    need special handling: near zero the scale degenerates to the identity
    limit, and near pi the skew part vanishes so the axis is recovered as the
    eigenvector of R for eigenvalue +1 with its sign fixed by the largest
    off-diagonal sums.
    """
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)

    if theta < SMALL_ANGLE:
        return vee(rot - rot.T) * 0.5

    if theta > np.pi - NEAR_PI_MARGIN:
        # R = I + 2 sin^2(theta/2) (aa^T - I) at theta == pi, so the diagonal
        # of (R + I) / 2 gives the squared axis components.
        axis_sq = np.clip((np.diag(rot) + 1.0) * 0.5, 0.0, None)
        axis = np.sqrt(axis_sq)
        # Off-diagonal entries fix the relative signs; anchor on the largest
        # component to avoid dividing by a vanishing one.
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            i, j = (k + 1) % 3, (k + 2) % 3
            axis[i] = np.copysign(axis[i], rot[k, i] + rot[i, k])
            axis[j] = np.copysign(axis[j], rot[k, j] + rot[j, k])
        return axis / np.linalg.norm(axis) * theta

    return vee(rot - rot.T) * (theta / (2.0 * np.sin(theta)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: apply() maps points p to R @ p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (n, 3)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self @ other: apply other first, then self."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))


def se3_ominus(pose_a: Pose, pose_b: Pose) -> np.ndarray:
    """Six-vector difference between poses: [log of relative rotation, relative translation].

    The relative transform is B^-1 A; the first three components are its
    rotation vector and the last three its translation. Identical poses give
    the zero vector.
    """
    rel = pose_b.inverse() @ pose_a
    return np.concatenate([so3_log(rel.rotation), rel.translation])


def align_svd(source: np.ndarray, target: np.ndarray) -> tuple[Pose, float]:
    """Least-squares rigid transform mapping source points onto target points.

    Minimizes sum ||target_j - (R source_j + t)||^2 over rotations and
    translations. Centroids reduce the problem to rotation only; the optimal
    rotation comes from the SVD of the source-target cross-covariance with a
    sign correction on the last column of V when the raw solution is a
    reflection. Returns the pose and the residual sum of squares.

    Raises CountMismatch for unpaired inputs and CollinearCorrespondences
    when the centered source has rank < 2 (rotation not recoverable).
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise CountMismatch(f"paired (n, 3) arrays required, got {source.shape} and {target.shape}")
    if source.shape[0] < 3:
        raise CollinearCorrespondences("need at least 3 correspondences")

    src_centroid = source.mean(axis=0)
    tgt_centroid = target.mean(axis=0)
    src_c = source - src_centroid
    tgt_c = target - tgt_centroid

    spectrum = np.linalg.svd(src_c, compute_uv=False)
    if spectrum[1] <= COLLINEAR_RTOL * max(spectrum[0], 1.0):
        raise CollinearCorrespondences("source points are collinear")

    cross_cov = src_c.T @ tgt_c
    u, _, vt = np.linalg.svd(cross_cov)
    v = vt.T
    rotation = v @ u.T
    if np.linalg.det(rotation) < 0.0:
        # Smallest singular value sits in the last column; flipping it turns
        # the reflection into the optimal proper rotation.
        v = v.copy()
        v[:, -1] = -v[:, -1]
        rotation = v @ u.T

    translation = tgt_centroid - rotation @ src_centroid
    pose = Pose(rotation, translation)
    residual = target - pose.apply(source)
    return pose, float(np.sum(residual * residual))


def mahalanobis_sq(error: np.ndarray, cov: np.ndarray) -> float:
    """Squared Mahalanobis norm e^T cov^-1 e via Cholesky solve."""
    error = np.asarray(error, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc
    y = np.linalg.solve(chol, error)
    return float(y @ y)


def write_poses(path, poses) -> None:
    """Write poses as 4x4 row-major text blocks, 17 significant digits, blank-line separated."""
    blocks = []
    for pose in poses:
        m = pose.matrix()
        blocks.append("\n".join(" ".join(f"{x:.17g}" for x in row) for row in m))
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks))
        fh.write("\n")


def read_poses(path) -> list[Pose]:
    """Read poses written by write_poses; '#' lines are ignored."""
    rows: list[list[float]] = []
    poses: list[Pose] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(tok) for tok in line.split()])
            if len(rows) == 4:
                poses.append(Pose.from_matrix(np.array(rows)))
                rows = []
    if rows:
        raise ValueError("trailing partial matrix block")
    return poses
