"""Marker observation in a single scan.

Composes the 2D tag detector with the spherical image model: adaptive
threshold search over binarizations, recovery of 3D corner coordinates
(interpolating corners that fall on unobserved pixels), and closed-form
per-marker pose estimation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import cloud as cloudmod
from .detect2d import Detection2D, detect_2d
from .errors import EmptyCloud, NoSymmetricPair, OutOfBounds
from .family import TagFamily, default_family
from .geom import Pose, align_svd
from .image import (
    BinaryImage,
    IntensityImage,
    ProjectionConfig,
    binarize,
    gaussian_blur,
    project,
    unproject,
)

log = logging.getLogger(__name__)

CORNER_SEARCH_WINDOW = 8       # rows scanned for a symmetric observed pair
SIDE_LENGTH_TOLERANCE = 0.2    # relative deviation allowed on quad side lengths


@dataclass(frozen=True)
class MarkerSpec:
    """Physical marker geometry: a thin square sheet of side `side` meters."""

    side: float
    thickness: float = 0.005

    def __post_init__(self):
        if self.side <= 0 or self.thickness <= 0:
            raise ValueError("marker dimensions must be positive")

    def corners_local(self) -> np.ndarray:
        """Corner coordinates in the marker frame, counter-clockwise from
        the bottom-left when looking at the face (+z toward the viewer)."""
        h = self.side / 2.0
        return np.array([
            [-h, -h, 0.0],
            [h, -h, 0.0],
            [h, h, 0.0],
            [-h, h, 0.0],
        ])


@dataclass(frozen=True)
class MarkerObservation:
    tag_id: int
    corners_px: np.ndarray    # (4, 2) pixel coordinates in the scan's image
    corners_3d: np.ndarray    # (4, 3) meters, sensor frame
    pose: Pose                # marker frame -> sensor frame
    e_pp: float               # squared point-to-point fit residual, m^2
    lam: float                # threshold at which the id first decoded
    scan: int = 0

    def to_json(self) -> str:
        record = {
            "scan": self.scan,
            "id": self.tag_id,
            "corners_px": self.corners_px.tolist(),
            "corners_3d": self.corners_3d.tolist(),
            "pose": self.pose.matrix().tolist(),
            "e_pp": self.e_pp,
            "lambda": self.lam,
        }
        return json.dumps(record, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "MarkerObservation":
        record = json.loads(line)
        return MarkerObservation(
            tag_id=int(record["id"]),
            corners_px=np.asarray(record["corners_px"], dtype=np.float64),
            corners_3d=np.asarray(record["corners_3d"], dtype=np.float64),
            pose=Pose.from_matrix(np.asarray(record["pose"], dtype=np.float64)),
            e_pp=float(record["e_pp"]),
            lam=float(record["lambda"]),
            scan=int(record["scan"]),
        )


def write_observations(path, observations) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for obs in observations:
            fh.write(obs.to_json() + "\n")


def read_observations(path) -> list[MarkerObservation]:
    out = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(MarkerObservation.from_json(line))
    return out


@dataclass(frozen=True)
class QueuedDetection:
    detection: Detection2D
    lam: float


@dataclass
class ThresholdSearch:
    scope: int
    step: float
    queue: list[QueuedDetection] = field(default_factory=list)
    lambda_star: float = 0.0

    def ids(self) -> list[int]:
        return [q.detection.tag_id for q in self.queue]


def adaptive_detect(raw: IntensityImage, family: TagFamily | None = None,
                    scope: int = 256, step: float = 1.0, *,
                    blur_sigma: float | None = None,
                    max_errors: int = 1) -> ThresholdSearch:
    """Sweep binarization thresholds, keeping every id that ever decodes.

    Walks lambda = step * i for i in [0, scope). At each threshold the
    detections are compared against the queue built so far: when at least
    as many markers decode as are queued, unseen ids join the queue (with
    the first threshold that produced them) and lambda* advances. Sweeps
    that decode nothing never advance lambda*, so a markerless image
    reports lambda* = 0.

    Binarization depends only on which distinct intensity values exceed
    the threshold, so detector calls are memoized on that count.
    """
    if scope < 1 or step <= 0:
        raise ValueError("scope must be >= 1 and step > 0")
    if family is None:
        family = default_family()

    observed_values = np.unique(raw.intensity[raw.observed])
    cache: dict[int, list[Detection2D]] = {}

    def detections_at(lam: float) -> list[Detection2D]:
        key = int(np.searchsorted(observed_values, lam, side="right"))
        if key not in cache:
            binary = binarize(raw, lam)
            if blur_sigma is not None:
                binary = gaussian_blur(binary, blur_sigma)
            cache[key] = detect_2d(binary, family, max_errors=max_errors)
        return cache[key]

    search = ThresholdSearch(scope=scope, step=step)
    for i in range(scope):
        lam = step * i
        found = detections_at(lam)
        if found and len(found) >= len(search.queue):
            known = set(search.ids())
            for det in found:
                if det.tag_id not in known:
                    search.queue.append(QueuedDetection(det, lam))
                    known.add(det.tag_id)
            search.lambda_star = lam
    return search


def corner_to_3d(img: IntensityImage, corner, window: int = CORNER_SEARCH_WINDOW) -> np.ndarray:
    """3D point for a detected 2D corner.

    An observed corner pixel unprojects directly (at the subpixel
    azimuth/inclination of the given coordinates). A corner on an
    unobserved pixel is interpolated from the nearest observed pair in
    the same column placed symmetrically about it: with ranges r_u, r_d
    and mu = r_d / r_u the point is

        p = mu / (1 + mu) * p_d + 1 / (1 + mu) * p_u

    which splits the chord between the two returns by the angle bisector
    through the corner's viewing ray. The result always lies on the
    segment [p_u, p_d].
    """
    u, v = float(corner[0]), float(corner[1])
    cfg = img.config
    col = int(np.rint(u))
    row = int(np.rint(v))
    if not (0 <= col < cfg.width and 0 <= row < cfg.height):
        raise OutOfBounds(f"corner ({u:.2f}, {v:.2f}) outside {cfg.width}x{cfg.height}")
    if img.observed[row, col]:
        return unproject(img, u, v)

    for d in range(1, window + 1):
        up, down = row + d, row - d
        if up >= cfg.height or down < 0:
            break
        if img.observed[up, col] and img.observed[down, col]:
            p_u = unproject(img, col, up)
            p_d = unproject(img, col, down)
            mu = img.range[down, col] / img.range[up, col]
            return (mu / (1.0 + mu)) * p_d + (1.0 / (1.0 + mu)) * p_u
    raise NoSymmetricPair(
        f"no observed symmetric pair within {window} rows of ({u:.2f}, {v:.2f})")


def estimate_marker_pose(obs_corners: np.ndarray, spec: MarkerSpec):
    """Closed-form marker pose from 4 corner correspondences.

    Returns (pose, e_pp) where pose maps marker-frame points into the
    observing sensor's frame and e_pp is the squared fit residual.
    """
    corners = np.asarray(obs_corners, dtype=np.float64)
    return align_svd(spec.corners_local(), corners)


@dataclass(frozen=True)
class ScanDetectConfig:
    """Knobs for single-scan detection."""

    theta_a: float                      # azimuth resolution, rad/px
    theta_i: float | None = None        # inclination resolution, defaults to theta_a
    scope: int = 256
    step: float = 1.0
    blur_sigma: float | None = None
    window: int = CORNER_SEARCH_WINDOW

    def resolutions(self):
        return self.theta_a, self.theta_i if self.theta_i is not None else self.theta_a


def detect_in_scan(cloud: "cloudmod.PointCloud", cfg: ScanDetectConfig,
                   family: TagFamily | None = None,
                   spec: MarkerSpec | None = None,
                   scan: int = 0) -> list[MarkerObservation]:
    """Full single-scan pipeline: project, threshold-sweep, lift to 3D.

    Observations whose recovered quad has any side length off by more
    than 20% from the configured marker size are dropped (a decode that
    survives the dictionary but lands on bad geometry).
    """
    if len(cloud.xyz) == 0:
        raise EmptyCloud("cannot detect markers in an empty cloud")
    if spec is None:
        spec = MarkerSpec(side=1.0)
    theta_a, theta_i = cfg.resolutions()
    proj_cfg = ProjectionConfig.for_cloud(cloud, theta_a, theta_i)
    img = project(cloud, proj_cfg)
    search = adaptive_detect(img, family, cfg.scope, cfg.step,
                             blur_sigma=cfg.blur_sigma)

    observations = []
    for queued in search.queue:
        det = queued.detection
        try:
            corners_3d = np.array([corner_to_3d(img, c, cfg.window)
                                   for c in det.corners_px])
        except (NoSymmetricPair, OutOfBounds) as exc:
            log.warning("marker %d dropped: %s", det.tag_id, exc)
            continue
        sides = np.linalg.norm(np.roll(corners_3d, -1, axis=0) - corners_3d, axis=1)
        if np.any(np.abs(sides - spec.side) > SIDE_LENGTH_TOLERANCE * spec.side):
            log.warning("marker %d dropped: side lengths %s vs size %.3f",
                        det.tag_id, np.round(sides, 3), spec.side)
            continue
        pose, e_pp = estimate_marker_pose(corners_3d, spec)
        observations.append(MarkerObservation(
            tag_id=det.tag_id, corners_px=det.corners_px, corners_3d=corners_3d,
            pose=pose, e_pp=e_pp, lam=queued.lam, scan=scan))
    return observations
