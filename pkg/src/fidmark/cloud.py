"""Point clouds with per-point intensity: container, file I/O, intensity-gradient
downsampling, Euclidean clustering, and PCA oriented bounding boxes.

The gradient estimate at a point is the linear part of a least-squares fit
I(p) ~ b + c . (p - p0) over the point's k nearest neighbors; points whose
gradient norm clears a threshold survive downsampling. Clusters of survivors
are later screened as marker candidates via their oriented bounding boxes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .errors import DegenerateCluster, EmptyCloud, RankDeficient
from .geom import Pose

logger = logging.getLogger(__name__)

# Relative eigenvalue floor below which the regression normal matrix is
# treated as rank deficient.
RANK_EPSILON = 1e-10
# Relative second-singular-value floor below which a cluster is collinear.
COLLINEAR_EPSILON = 1e-9


@dataclass
class PointCloud:
    """Positions (n, 3) in meters plus intensities (n,), order-stable."""

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.xyz.shape[0] != self.intensity.shape[0]:
            raise ValueError("xyz and intensity counts differ")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    def select(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.intensity[index])

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.xyz), self.intensity.copy())

    def concatenated(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.xyz, other.xyz]),
                          np.concatenate([self.intensity, other.intensity]))


@dataclass(frozen=True)
class GradientEstimate:
    gradient: np.ndarray      # intensity units per meter
    intercept: float          # offset relative to the neighborhood mean intensity
    neighbor_count: int


@dataclass(frozen=True)
class OrientedBox:
    """PCA box: pose maps world points into the box frame, extents l >= w >= h."""

    pose: Pose
    extents: np.ndarray  # (l, w, h)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    @property
    def footprint(self) -> float:
        return float(self.extents[0] * self.extents[1])


def _design_normal_solve(delta: np.ndarray, rhs: np.ndarray):
    """Solve the 4-parameter regression for stacked neighborhoods.

    delta: (n, k, 3) neighbor offsets, rhs: (n, k) centered intensities.
    Returns (coeffs (n, 4), ok (n,) bool); coeffs rows are [b, cx, cy, cz].

    Exactly planar neighborhoods leave the normal direction unobservable;
    the minimum-norm solution zeroes that gradient component instead of
    failing, so flat synthetic surfaces still yield in-plane gradients.
    Neighborhoods spanning less than a plane (rank < 3) are flagged not-ok.
    """
    n, k, _ = delta.shape
    design = np.concatenate([np.ones((n, k, 1)), delta], axis=2)
    normal = np.einsum("nki,nkj->nij", design, design)
    target = np.einsum("nki,nk->ni", design, rhs)

    eigvals, eigvecs = np.linalg.eigh(normal)
    cutoff = RANK_EPSILON * np.maximum(eigvals[:, -1:], 1.0)
    keep = eigvals > cutoff
    ok = keep.sum(axis=1) >= 3

    inv_eig = np.where(keep, 1.0 / np.where(keep, eigvals, 1.0), 0.0)
    # pinv(normal) @ target, using the spectral factorization already in hand
    coeffs = np.einsum("nij,nj,nkj,nk->ni", eigvecs, inv_eig, eigvecs, target)
    coeffs[~ok] = 0.0
    return coeffs, ok


def intensity_gradient(p0: np.ndarray, neighbors: PointCloud) -> GradientEstimate:
    """Least-squares intensity gradient around p0 from a fixed neighborhood.

    Coordinates are centered on p0 and intensities on the neighborhood mean;
    the design matrix carries a constant column so the intercept absorbs the
    local offset. Planar neighborhoods give the in-plane gradient with a zero
    out-of-plane component (minimum-norm solve). Raises RankDeficient when
    the spread degenerates below a plane.
    """
    p0 = np.asarray(p0, dtype=np.float64).reshape(3)
    k = len(neighbors)
    if k < 4:
        raise RankDeficient(f"need at least 4 neighbors, got {k}")
    delta = (neighbors.xyz - p0)[None, :, :]
    rhs = (neighbors.intensity - neighbors.intensity.mean())[None, :]
    coeffs, ok = _design_normal_solve(delta, rhs)
    if not ok[0]:
        raise RankDeficient("neighborhood spread degenerates below a plane")
    return GradientEstimate(gradient=coeffs[0, 1:4], intercept=float(coeffs[0, 0]),
                            neighbor_count=k)


def gradient_norms(cloud: PointCloud, k: int = 15) -> tuple[np.ndarray, np.ndarray]:
    """Per-point |gradient| over k nearest neighbors (self included).

    Returns (norms (n,), ok (n,) bool); rank-deficient neighborhoods get
    norm 0 and ok False.
    """
    n = len(cloud)
    if n == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    k_eff = min(k, n)
    tree = cKDTree(cloud.xyz)
    _, idx = tree.query(cloud.xyz, k=k_eff)
    if k_eff == 1:
        idx = idx[:, None]
    delta = cloud.xyz[idx] - cloud.xyz[:, None, :]
    inten = cloud.intensity[idx]
    rhs = inten - inten.mean(axis=1, keepdims=True)
    coeffs, ok = _design_normal_solve(delta, rhs)
    norms = np.linalg.norm(coeffs[:, 1:4], axis=1)
    norms[~ok] = 0.0
    return norms, ok


def downsample_by_gradient(cloud: PointCloud, k: int = 15, tau_g: float = 25.0) -> PointCloud:
    """Keep exactly the points whose intensity-gradient norm exceeds tau_g.

    Order is preserved. Points whose neighborhoods are rank deficient are
    dropped (counted in the log).
    """
    if k < 4:
        raise ValueError("k must be at least 4")
    if not tau_g > 0:
        raise ValueError("tau_g must be positive")
    norms, ok = gradient_norms(cloud, k)
    dropped = int(np.count_nonzero(~ok))
    if dropped:
        logger.debug("downsample: %d points with rank-deficient neighborhoods dropped", dropped)
    return cloud.select(ok & (norms > tau_g))


def euclidean_cluster(cloud: PointCloud, tol: float, min_size: int = 1,
                      max_size: int = 1_000_000_000) -> list[PointCloud]:
    """Connected components of the within-tol adjacency graph, size filtered.

    Clusters come back ordered by their first point's index; points inside a
    cluster keep input order.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not (0 < min_size <= max_size):
        raise ValueError("need 0 < min_size <= max_size")
    n = len(cloud)
    if n == 0:
        return []

    parent = np.arange(n)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    tree = cKDTree(cloud.xyz)
    for i, j in tree.query_pairs(r=tol):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    clusters = []
    for root in sorted(groups):
        members = groups[root]
        if min_size <= len(members) <= max_size:
            clusters.append(cloud.select(np.array(members)))
    return clusters


def fit_obb(cluster: PointCloud) -> OrientedBox:
    """PCA-aligned oriented bounding box of a cluster.

    Axes are the covariance eigenvectors reordered so the extents satisfy
    l >= w >= h; each of the first two axes is flipped to make its dot with
    (1,1,1) non-negative (ties resolved toward +x) and the third completes a
    right-handed frame. The returned pose maps world points into the box
    frame, where the cluster is centered at the origin.
    """
    n = len(cluster)
    if n < 3:
        raise DegenerateCluster(f"need at least 3 points, got {n}")
    pts = cluster.xyz
    centroid = pts.mean(axis=0)
    centered = pts - centroid

    spectrum = np.linalg.svd(centered, compute_uv=False)
    if spectrum[1] <= COLLINEAR_EPSILON * max(spectrum[0], 1.0):
        raise DegenerateCluster("cluster points are collinear")

    cov = centered.T @ centered / n
    _, vecs = np.linalg.eigh(cov)
    axes = vecs.T  # rows

    proj = centered @ axes.T
    extents = proj.max(axis=0) - proj.min(axis=0)
    order = np.argsort(-extents, kind="stable")
    axes = axes[order]
    extents = extents[order]

    for i in range(2):
        s = float(axes[i] @ np.ones(3))
        if s == 0.0:
            for component in axes[i]:
                if component != 0.0:
                    s = component
                    break
        if s < 0.0:
            axes[i] = -axes[i]
    axes[2] = np.cross(axes[0], axes[1])

    proj = centered @ axes.T
    mid = (proj.max(axis=0) + proj.min(axis=0)) / 2.0
    center = centroid + mid @ axes
    pose = Pose(axes, -(axes @ center))
    return OrientedBox(pose=pose, extents=extents)


# ---------------------------------------------------------------------------
# File I/O


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with double x, y, z, intensity."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment generated by fidmark {__version__}",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property double intensity",
        "end_header",
    ]
    rows = [
        f"{x:.17g} {y:.17g} {z:.17g} {i:.17g}"
        for (x, y, z), i in zip(cloud.xyz, cloud.intensity)
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines + rows))
        fh.write("\n")


def read_ply(path) -> PointCloud:
    """Read ASCII PLY written by write_ply (x, y, z, intensity properties)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        properties = []
        for line in fh:
            token = line.strip()
            if token.startswith("comment"):
                continue
            if token.startswith("format"):
                if "ascii" not in token:
                    raise ValueError(f"{path}: only ASCII PLY is supported")
                continue
            if token.startswith("element vertex"):
                count = int(token.split()[-1])
                continue
            if token.startswith("element"):
                raise ValueError(f"{path}: unsupported element {token!r}")
            if token.startswith("property"):
                properties.append(token.split()[-1])
                continue
            if token == "end_header":
                break
        if count is None:
            raise ValueError(f"{path}: missing vertex element")
        for name in ("x", "y", "z", "intensity"):
            if name not in properties:
                raise ValueError(f"{path}: missing property {name}")
        cols = {name: properties.index(name) for name in ("x", "y", "z", "intensity")}
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count) if count else np.zeros((0, 4))
    if data.shape[0] != count:
        raise ValueError(f"{path}: expected {count} vertices, found {data.shape[0]}")
    xyz = np.column_stack([data[:, cols["x"]], data[:, cols["y"]], data[:, cols["z"]]]) \
        if count else np.zeros((0, 3))
    inten = data[:, cols["intensity"]] if count else np.zeros(0)
    return PointCloud(xyz, inten)


def read_xyzi(path) -> PointCloud:
    """Whitespace-separated x y z intensity rows; '#' starts a comment line."""
    data = np.loadtxt(path, comments="#", dtype=np.float64, ndmin=2)
    if data.size == 0:
        return PointCloud.empty()
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 columns, found {data.shape[1]}")
    return PointCloud(data[:, :3], data[:, 3])


def load_cloud(path) -> PointCloud:
    """Dispatch on extension: .ply or plain-text xyzi."""
    text = str(path)
    if text.endswith(".ply"):
        return read_ply(path)
    return read_xyzi(path)


def require_nonempty(cloud: PointCloud, what: str) -> None:
    if len(cloud) == 0:
        raise EmptyCloud(f"{what}: empty point cloud")
