"""Marker localization inside full 3D maps.

Whole-map spherical projection fails (occlusion, range-thinned pixels), so
markers are found geometrically first: keep high intensity-gradient
points, cluster them, fit oriented boxes, and keep boxes that could wrap a
thin square sheet of the configured size. Each surviving candidate is cut
out with a buffer, re-centered onto a virtual plane 1 m in front of a
virtual sensor, and projected there at close range for ordinary 2D
detection. Decoded corners ride the inverse chain back into map
coordinates.

A candidate's facing is unknown (a thin sheet has two sides), so both the
intermediate image and its horizontal mirror are decoded; the dictionary
is mirror-free, so exactly one orientation can succeed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .cloud import (
    OrientedBox,
    PointCloud,
    downsample_by_gradient,
    euclidean_cluster,
    fit_obb,
)
from .errors import DegenerateCluster, EmptyCloud, NoSymmetricPair, OutOfBounds
from .family import TagFamily, default_family
from .geom import Pose
from .image import ProjectionConfig, dump_images, flip_horizontal, project, unflip_u
from .marker import (
    MarkerObservation,
    MarkerSpec,
    adaptive_detect,
    corner_to_3d,
    estimate_marker_pose,
)

log = logging.getLogger(__name__)

# Virtual sensor view axes: box thickness axis becomes the viewing axis.
_VIEW_PERM = np.array([
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
])


@dataclass(frozen=True)
class IntermediatePlaneCfg:
    """The re-projection target plane x = `offset` meters (default 1 m)."""

    offset: float = 1.0

    @property
    def pose(self) -> Pose:
        return Pose(rotation=np.eye(3),
                    translation=np.array([self.offset, 0.0, 0.0]))


@dataclass(frozen=True)
class CandidateCluster:
    obb: OrientedBox
    points: PointCloud     # raw-map points inside the buffered box
    index: int             # provenance: position in the cluster list


@dataclass(frozen=True)
class MapLocateConfig:
    neighbors: int = 15            # kNN size for the gradient stage
    tau_g: float = 25.0            # gradient magnitude keep-threshold
    cluster_tol: float | None = None   # clustering distance; default side/4
    min_cluster: int = 30
    buffer: float | None = None    # footprint enlargement; default 2a
    sigma_noise: float = 0.0       # sensor noise feeding the height criterion
    scope: int = 256               # threshold sweep, as in single-scan detection
    step: float = 1.0
    max_errors: int = 1
    blur_sigma: float | None = None
    window: int = 8
    min_cell_px: float = 8.0       # target pixels per tag cell on the plane


def candidate_filter(boxes, spec: MarkerSpec,
                     sigma_noise: float = 0.0) -> list[OrientedBox]:
    """Boxes that could wrap a thin square sheet of the marker's size.

    Keeps a box when its space diagonal lies in
    [sqrt(2a^2 + t^2), sqrt(4a^2 + t^2)] (a flat square of side a spans
    sqrt(2)a..2a across rotations of the box fit), its footprint aspect
    ratio is within [1/1.5, 1.5], and its thickness does not exceed
    max(4 sigma, 2t).
    """
    a, t = spec.side, spec.thickness
    lo = np.sqrt(2.0 * a * a + t * t)
    hi = np.sqrt(4.0 * a * a + t * t)
    h_max = max(4.0 * sigma_noise, 2.0 * t)
    kept = []
    for box in boxes:
        l, w, h = box.extents
        diag = box.diagonal
        if not (lo <= diag <= hi):
            continue
        ratio = l / w if w > 0 else np.inf
        if not (1.0 / 1.5 <= ratio <= 1.5):
            continue
        if h > h_max:
            continue
        kept.append(box)
    return kept


def to_intermediate_plane(points: PointCloud, t_obb: Pose,
                          cfg: IntermediatePlaneCfg | None = None) -> PointCloud:
    """Re-center a candidate onto the intermediate plane.

    `t_obb` maps map coordinates into the box frame (an OrientedBox's
    `pose` field); the box frame is then pushed out along x so the sheet
    sits on the plane x = 1 m in front of the virtual sensor.
    """
    if len(points) == 0:
        raise EmptyCloud("no points to transfer")
    if cfg is None:
        cfg = IntermediatePlaneCfg()
    return points.transformed(cfg.pose @ t_obb)


def _refine_box(cluster: PointCloud, box: OrientedBox) -> OrientedBox:
    """Re-orient a box's in-plane axes to the minimum-area rectangle.

    Square-ish flat clusters have nearly equal in-plane second moments, so
    the PCA axes can land anywhere up to 45 degrees off the sheet's edges,
    inflating the fitted extents. The thickness axis from the PCA fit is
    reliable; the footprint rotation is recomputed from the minimal
    enclosing rectangle, which tracks the edges regardless of symmetry.
    """
    local = box.pose.apply(cluster.xyz)
    (cx, cy), (w_r, h_r), angle_deg = cv2.minAreaRect(
        local[:, :2].astype(np.float32))
    angle = np.deg2rad(angle_deg)
    if h_r > w_r:
        w_r, h_r = h_r, w_r
        angle += np.pi / 2.0
    z_lo, z_hi = local[:, 2].min(), local[:, 2].max()
    center = np.array([cx, cy, (z_lo + z_hi) / 2.0])
    c, s = np.cos(angle), np.sin(angle)
    spin_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    refine = Pose(rotation=spin_t, translation=-spin_t @ center)
    return OrientedBox(pose=refine @ box.pose,
                       extents=np.array([w_r, h_r, z_hi - z_lo]))


def _buffered_extents(box: OrientedBox, spec: MarkerSpec, cfg: MapLocateConfig):
    t_b = cfg.buffer if cfg.buffer is not None else 2.0 * spec.side
    l, w, h = box.extents
    h_buf = max(2.0 * h, 6.0 * cfg.sigma_noise + 2.0 * spec.thickness, 0.02)
    return np.array([l + t_b, w + t_b, h_buf])


def _extract_buffered(map_cloud: PointCloud, box: OrientedBox,
                      spec: MarkerSpec, cfg: MapLocateConfig) -> PointCloud:
    half = _buffered_extents(box, spec, cfg) / 2.0
    local = box.pose.apply(map_cloud.xyz)
    inside = np.all(np.abs(local) <= half + 1e-12, axis=1)
    return map_cloud.select(inside)


def _plane_resolution(points_view: np.ndarray, spec: MarkerSpec,
                      cfg: MapLocateConfig) -> float:
    """Angular resolution for the intermediate projection.

    Aim for `min_cell_px` pixels per tag cell at the 1 m plane, but never
    finer than the cloud's own spacing supports (sparser pixels than
    points would riddle the image with unobserved holes).
    """
    cell_angle = spec.side / 6.0 / 1.0
    theta_target = cell_angle / cfg.min_cell_px
    if len(points_view) > 2:
        d, _ = cKDTree(points_view).query(points_view, k=2)
        spacing = float(np.median(d[:, 1]))
        theta_floor = 1.1 * spacing / 1.0
        return max(theta_target, theta_floor)
    return theta_target


def find_candidates(map_cloud: PointCloud, spec: MarkerSpec,
                    cfg: MapLocateConfig | None = None) -> list[CandidateCluster]:
    """Geometry stage: gradient downsampling through buffered extraction."""
    if cfg is None:
        cfg = MapLocateConfig()
    if len(map_cloud) == 0:
        raise EmptyCloud("cannot search an empty map")
    sparse = downsample_by_gradient(map_cloud, k=cfg.neighbors, tau_g=cfg.tau_g)
    if len(sparse) == 0:
        return []
    # The gradient net of one marker is interrupted at cell junctions
    # (symmetric neighborhoods cancel), so the tolerance must bridge
    # cell-scale gaps without reaching neighboring structures.
    tol = cfg.cluster_tol if cfg.cluster_tol is not None else spec.side / 4.0
    clusters = euclidean_cluster(sparse, tol=tol, min_size=cfg.min_cluster)
    candidates = []
    for idx, cluster in enumerate(clusters):
        try:
            box = _refine_box(cluster, fit_obb(cluster))
        except DegenerateCluster:
            continue
        if not candidate_filter([box], spec, cfg.sigma_noise):
            continue
        points = _extract_buffered(map_cloud, box, spec, cfg)
        if len(points) >= cfg.min_cluster:
            candidates.append(CandidateCluster(obb=box, points=points, index=idx))
    return candidates


def locate_markers_in_map(map_cloud: PointCloud, spec: MarkerSpec,
                          family: TagFamily | None = None,
                          cfg: MapLocateConfig | None = None,
                          dump_dir=None) -> list[MarkerObservation]:
    """Find and decode markers anywhere in a map cloud.

    Returns observations whose corners and poses live in the map frame.
    When several candidates decode the same id the best fit (lowest e_pp)
    wins. Markerless maps return an empty list.
    """
    if cfg is None:
        cfg = MapLocateConfig()
    if family is None:
        family = default_family()
    plane_cfg = IntermediatePlaneCfg()

    best: dict[int, MarkerObservation] = {}
    for cand in find_candidates(map_cloud, spec, cfg):
        # The cluster's thickness axis must face the virtual sensor, so the
        # box frame is permuted before the plane shift.
        view_pose = Pose(rotation=_VIEW_PERM, translation=np.zeros(3)) @ cand.obb.pose
        chain = plane_cfg.pose @ view_pose
        view_cloud = cand.points.transformed(chain)

        theta = _plane_resolution(view_cloud.xyz, spec, cfg)
        proj_cfg = ProjectionConfig.for_cloud(view_cloud, theta, theta)
        img = project(view_cloud, proj_cfg)
        if dump_dir is not None:
            from .image import binarize
            dump_images(img, binarize(img, cfg.step * (cfg.scope // 2)),
                        dump_dir, f"candidate_{cand.index:03d}")

        for flipped in (False, True):
            face = flip_horizontal(img) if flipped else img
            search = adaptive_detect(face, family, cfg.scope, cfg.step,
                                     blur_sigma=cfg.blur_sigma,
                                     max_errors=cfg.max_errors)
            for queued in search.queue:
                det = queued.detection
                corners_px = det.corners_px.copy()
                if flipped:
                    corners_px[:, 0] = [unflip_u(u, img.config)
                                        for u in corners_px[:, 0]]
                try:
                    corners_view = np.array([corner_to_3d(img, c, cfg.window)
                                             for c in corners_px])
                except (NoSymmetricPair, OutOfBounds) as exc:
                    log.warning("candidate %d id %d dropped: %s",
                                cand.index, det.tag_id, exc)
                    continue
                corners_map = chain.inverse().apply(corners_view)
                sides = np.linalg.norm(
                    np.roll(corners_map, -1, axis=0) - corners_map, axis=1)
                if np.any(np.abs(sides - spec.side) > 0.2 * spec.side):
                    continue
                pose, e_pp = estimate_marker_pose(corners_map, spec)
                obs = MarkerObservation(
                    tag_id=det.tag_id, corners_px=corners_px,
                    corners_3d=corners_map, pose=pose, e_pp=e_pp,
                    lam=queued.lam)
                old = best.get(det.tag_id)
                if old is None or obs.e_pp < old.e_pp:
                    best[det.tag_id] = obs
    return [best[tag_id] for tag_id in sorted(best)]
