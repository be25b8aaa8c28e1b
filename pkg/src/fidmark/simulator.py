"""Synthetic LiDAR scenes: planes carrying thin-sheet markers.

Markers change surface intensity only, never geometry, so a scan of a
scene with markers removed contains byte-identical point positions. Two
idealized sampling patterns are provided: a mechanical grid (gap-free in
the projected image when the image resolution matches the beam spacing)
and a solid-state rosette whose short dwells leave unobserved spots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .family import TagFamily, default_family
from .geom import Pose
from .marker import MarkerObservation, MarkerSpec, estimate_marker_pose
from .metrics import overlap_rate

WHITE_INTENSITY = 220.0
BLACK_INTENSITY = 30.0
GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class PlaneSpec:
    """Finite rectangle. The pose maps plane-local coordinates to world;
    the rectangle spans local x in [-width/2, width/2] and local y in
    [-height/2, height/2]; local +z is the surface normal."""

    pose: Pose
    width: float
    height: float
    intensity: float = 100.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("plane extents must be positive")

    @property
    def normal(self) -> np.ndarray:
        return self.pose.rotation[:, 2]


@dataclass(frozen=True)
class MarkerPlacement:
    """A marker glued flat onto a plane.

    `cell_grid` overrides the tag pattern (full cells x cells array) for
    decoy patches that look like markers geometrically but do not decode;
    decoys use tag_id = -1 and are excluded from ground truth.
    """

    tag_id: int
    plane: int
    center: tuple[float, float]
    side: float
    rotation: float = 0.0
    cell_grid: np.ndarray | None = None
    white: float | None = None    # per-marker contrast override
    black: float | None = None

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("marker side must be positive")
        if self.tag_id < 0 and self.cell_grid is None:
            raise ValueError("negative tag id requires an explicit cell grid")


@dataclass(frozen=True)
class Scene:
    planes: tuple[PlaneSpec, ...]
    markers: tuple[MarkerPlacement, ...] = ()
    white: float = WHITE_INTENSITY
    black: float = BLACK_INTENSITY
    family: TagFamily | None = None

    def __post_init__(self):
        ids = [m.tag_id for m in self.markers if m.tag_id >= 0]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate marker ids in scene")
        for m in self.markers:
            plane = self.planes[m.plane]
            reach = m.side / 2.0 * (abs(np.cos(m.rotation)) + abs(np.sin(m.rotation)))
            if (abs(m.center[0]) + reach > plane.width / 2.0 + 1e-12 or
                    abs(m.center[1]) + reach > plane.height / 2.0 + 1e-12):
                raise ValueError(f"marker {m.tag_id} exceeds its plane extent")

    def tag_family(self) -> TagFamily:
        return self.family if self.family is not None else default_family()

    def marker_pose_world(self, placement: MarkerPlacement) -> Pose:
        plane = self.planes[placement.plane]
        c, s = np.cos(placement.rotation), np.sin(placement.rotation)
        spin = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        local = Pose(rotation=spin,
                     translation=np.array([placement.center[0],
                                           placement.center[1], 0.0]))
        return plane.pose @ local

    def marker_corners_world(self, placement: MarkerPlacement) -> np.ndarray:
        spec = MarkerSpec(side=placement.side)
        return self.marker_pose_world(placement).apply(spec.corners_local())

    def corner_registry(self) -> dict[int, np.ndarray]:
        """Ground-truth corner positions for every real (non-decoy) marker."""
        return {m.tag_id: self.marker_corners_world(m)
                for m in self.markers if m.tag_id >= 0}

    def paint(self, plane_index: int, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
        """Surface intensity at plane-local coordinates (vectorized)."""
        out = np.full(lx.shape, self.planes[plane_index].intensity)
        family = self.tag_family()
        for m in self.markers:
            if m.plane != plane_index:
                continue
            grid = m.cell_grid if m.cell_grid is not None else family.full_grid(m.tag_id)
            cells = grid.shape[0]
            cell = m.side / cells
            c, s = np.cos(m.rotation), np.sin(m.rotation)
            dx, dy = lx - m.center[0], ly - m.center[1]
            mx = c * dx + s * dy
            my = -s * dx + c * dy
            half = m.side / 2.0
            inside = (np.abs(mx) <= half) & (np.abs(my) <= half)
            col = np.clip(((mx + half) / cell).astype(np.int64), 0, cells - 1)
            row = np.clip(((half - my) / cell).astype(np.int64), 0, cells - 1)
            white = self.white if m.white is None else m.white
            black = self.black if m.black is None else m.black
            values = np.where(grid[row, col] > 0, white, black)
            out = np.where(inside, values, out)
        return out


def plane_facing(point: np.ndarray, toward: np.ndarray) -> Pose:
    """Plane pose at `point` with the normal aimed at `toward`."""
    z = np.asarray(toward, dtype=np.float64) - np.asarray(point, dtype=np.float64)
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        raise ValueError("plane target coincides with plane point")
    z = z / norm
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.99 else np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.column_stack([x, y, z])
    return Pose(rotation=rot, translation=np.asarray(point, dtype=np.float64))


@dataclass(frozen=True)
class Mechanical:
    """Spinning-grid sampler: one ray per (azimuth, inclination) step."""

    theta_h: float
    theta_v: float
    fov_h: float = np.deg2rad(120.0)
    fov_v: float = np.deg2rad(40.0)

    def __post_init__(self):
        if self.theta_h <= 0 or self.theta_v <= 0:
            raise ValueError("angular steps must be positive")

    def directions(self) -> np.ndarray:
        kh = int(np.floor(self.fov_h / 2.0 / self.theta_h + 1e-9))
        kv = int(np.floor(self.fov_v / 2.0 / self.theta_v + 1e-9))
        theta = np.arange(-kh, kh + 1) * self.theta_h
        phi = np.arange(-kv, kv + 1) * self.theta_v
        tt, pp = np.meshgrid(theta, phi)
        return _angles_to_dirs(tt.ravel(), pp.ravel())

    def contains(self, d: np.ndarray) -> bool:
        theta = np.arctan2(d[1], d[0])
        phi = np.arctan2(d[2], np.hypot(d[0], d[1]))
        return bool(abs(theta) <= self.fov_h / 2.0 + 1e-12 and
                    abs(phi) <= self.fov_v / 2.0 + 1e-12)


@dataclass(frozen=True)
class SolidState:
    """Rosette sampler: the beam sweeps a rose curve in angle space.

    With petals/spin in an irrational ratio consecutive sweeps do not
    retrace, so coverage densifies with the sample count; short dwells
    leave unobserved spots inside the field of view.
    """

    fov: float = np.deg2rad(70.0)
    samples: int = 40000
    petals: float = 5.0
    spin: float = 5.0 * GOLDEN_RATIO

    def __post_init__(self):
        if self.fov <= 0 or self.samples < 1:
            raise ValueError("fov and sample count must be positive")

    def directions(self) -> np.ndarray:
        t = (np.arange(self.samples) + 0.5) / self.samples
        rho = self.fov / 2.0 * np.cos(2.0 * np.pi * self.petals * t)
        psi = 2.0 * np.pi * self.spin * t
        return _angles_to_dirs(rho * np.cos(psi), rho * np.sin(psi))

    def contains(self, d: np.ndarray) -> bool:
        return bool(np.arccos(np.clip(d[0], -1.0, 1.0)) <= self.fov / 2.0 + 1e-12)


def _angles_to_dirs(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.column_stack([
        np.cos(phi) * np.cos(theta),
        np.cos(phi) * np.sin(theta),
        np.sin(phi),
    ])


@dataclass(frozen=True)
class SensorModel:
    pattern: Mechanical | SolidState
    sigma_r: float = 0.0
    sigma_i: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_r < 0 or self.sigma_i < 0:
            raise ValueError("noise levels must be non-negative")


def sample_scan(scene: Scene, sensor_pose: Pose, model: SensorModel,
                scan_index: int = 0) -> PointCloud:
    """Cast one ray per pattern sample; points come back in the sensor frame.

    Each ray keeps its nearest plane hit. Range noise perturbs the point
    along its ray; intensities are quantized to whole numbers like real
    sensors report.
    """
    dirs_sensor = model.pattern.directions()
    dirs_world = dirs_sensor @ sensor_pose.rotation.T
    origin = sensor_pose.translation

    n = len(dirs_sensor)
    best_s = np.full(n, np.inf)
    best_plane = np.full(n, -1, dtype=np.int64)
    best_lx = np.zeros(n)
    best_ly = np.zeros(n)

    for pi, plane in enumerate(scene.planes):
        normal = plane.normal
        denom = dirs_world @ normal
        offset = (plane.pose.translation - origin) @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, offset / denom, np.inf)
        hits = origin + s[:, None] * dirs_world
        local = (hits - plane.pose.translation) @ plane.pose.rotation
        inside = ((s > 1e-9) & np.isfinite(s) &
                  (np.abs(local[:, 0]) <= plane.width / 2.0) &
                  (np.abs(local[:, 1]) <= plane.height / 2.0))
        closer = inside & (s < best_s)
        best_s[closer] = s[closer]
        best_plane[closer] = pi
        best_lx[closer] = local[closer, 0]
        best_ly[closer] = local[closer, 1]

    hit = best_plane >= 0
    if not np.any(hit):
        return PointCloud.empty()

    intensity = np.zeros(n)
    for pi in range(len(scene.planes)):
        mask = hit & (best_plane == pi)
        if np.any(mask):
            intensity[mask] = scene.paint(pi, best_lx[mask], best_ly[mask])

    rng = np.random.default_rng([model.seed, scan_index])
    ranges = best_s[hit]
    if model.sigma_r > 0:
        ranges = ranges + rng.normal(0.0, model.sigma_r, size=ranges.shape)
    values = intensity[hit]
    if model.sigma_i > 0:
        values = values + rng.normal(0.0, model.sigma_i, size=values.shape)
    values = np.clip(np.rint(values), 0.0, 255.0)

    xyz = dirs_sensor[hit] * ranges[:, None]
    return PointCloud(xyz=xyz, intensity=values)


def sample_map(scene: Scene, spacing: float, sigma: float = 0.0,
               seed: int = 0) -> PointCloud:
    """Dense world-frame cloud: every plane sampled on a regular grid.

    Stands in for an accumulated SLAM map; `sigma` jitters points along
    their plane normal.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    rng = np.random.default_rng([seed, 104729])
    parts_xyz, parts_int = [], []
    for pi, plane in enumerate(scene.planes):
        xs = np.arange(-plane.width / 2.0 + spacing / 2.0, plane.width / 2.0, spacing)
        ys = np.arange(-plane.height / 2.0 + spacing / 2.0, plane.height / 2.0, spacing)
        gx, gy = np.meshgrid(xs, ys)
        lx, ly = gx.ravel(), gy.ravel()
        lz = np.zeros_like(lx)
        if sigma > 0:
            lz = rng.normal(0.0, sigma, size=lx.shape)
        local = np.column_stack([lx, ly, lz])
        parts_xyz.append(plane.pose.apply(local))
        parts_int.append(np.clip(np.rint(scene.paint(pi, lx, ly)), 0.0, 255.0))
    return PointCloud(xyz=np.vstack(parts_xyz), intensity=np.concatenate(parts_int))


@dataclass(frozen=True)
class Dataset:
    scans: list[PointCloud]          # sensor-frame clouds
    poses: list[Pose]                # sensor -> world, ground truth
    marker_corners: dict[int, np.ndarray]
    overlaps: dict[tuple[int, int], float]


def make_dataset(scene: Scene, viewpoints: list[Pose], model: SensorModel,
                 overlap_tau: float = 0.05) -> Dataset:
    if not viewpoints:
        raise ValueError("need at least one viewpoint")
    scans = [sample_scan(scene, vp, model, scan_index=i)
             for i, vp in enumerate(viewpoints)]
    overlaps = {}
    world = [scans[i].transformed(viewpoints[i]) if len(scans[i]) else scans[i]
             for i in range(len(scans))]
    for i in range(len(scans)):
        for j in range(i + 1, len(scans)):
            if len(world[i]) and len(world[j]):
                overlaps[(i, j)] = overlap_rate(world[i], world[j], overlap_tau)
            else:
                overlaps[(i, j)] = 0.0
    return Dataset(scans=scans, poses=list(viewpoints),
                   marker_corners=scene.corner_registry(), overlaps=overlaps)


def synthetic_observations(scene: Scene, viewpoints: list[Pose],
                           sigma_corner: float = 0.0, seed: int = 0,
                           pattern=None) -> list[list[MarkerObservation]]:
    """Ground-truth marker observations, bypassing image detection.

    For every viewpoint, each front-facing (and in-FoV, when a pattern is
    given) marker yields an observation whose corners are the true corner
    positions in the viewpoint's frame plus isotropic Gaussian noise.
    """
    per_scan = []
    for i, vp in enumerate(viewpoints):
        rng = np.random.default_rng([seed, i, 1])
        inv = vp.inverse()
        obs = []
        for m in scene.markers:
            if m.tag_id < 0:
                continue
            pose_w = scene.marker_pose_world(m)
            center_w = pose_w.translation
            to_sensor = vp.translation - center_w
            if pose_w.rotation[:, 2] @ to_sensor <= 0:
                continue  # facing away
            if pattern is not None:
                d = inv.apply(center_w[None, :])[0]
                norm = np.linalg.norm(d)
                if norm < 1e-9 or not pattern.contains(d / norm):
                    continue
            corners = inv.apply(scene.marker_corners_world(m))
            if sigma_corner > 0:
                corners = corners + rng.normal(0.0, sigma_corner, size=corners.shape)
            pose, e_pp = estimate_marker_pose(corners, MarkerSpec(side=m.side))
            obs.append(MarkerObservation(
                tag_id=m.tag_id, corners_px=np.zeros((4, 2)), corners_3d=corners,
                pose=pose, e_pp=e_pp, lam=0.0, scan=i))
        per_scan.append(obs)
    return per_scan


def _pose_to_list(pose: Pose):
    return pose.matrix().tolist()


def _pose_from_list(data) -> Pose:
    return Pose.from_matrix(np.asarray(data, dtype=np.float64))


def scene_to_dict(scene: Scene, viewpoints: list[Pose], model: SensorModel) -> dict:
    pattern = model.pattern
    if isinstance(pattern, Mechanical):
        pat = {"kind": "mechanical", "theta_h": pattern.theta_h,
               "theta_v": pattern.theta_v, "fov_h": pattern.fov_h,
               "fov_v": pattern.fov_v}
    else:
        pat = {"kind": "solid_state", "fov": pattern.fov, "samples": pattern.samples,
               "petals": pattern.petals, "spin": pattern.spin}
    markers = []
    for m in scene.markers:
        entry = {"id": m.tag_id, "plane": m.plane, "center": list(m.center),
                 "side": m.side, "rotation": m.rotation}
        if m.cell_grid is not None:
            entry["cells"] = m.cell_grid.tolist()
        if m.white is not None:
            entry["white"] = m.white
        if m.black is not None:
            entry["black"] = m.black
        markers.append(entry)
    return {
        "planes": [{"pose": _pose_to_list(p.pose), "width": p.width,
                    "height": p.height, "intensity": p.intensity}
                   for p in scene.planes],
        "markers": markers,
        "white": scene.white,
        "black": scene.black,
        "viewpoints": [_pose_to_list(vp) for vp in viewpoints],
        "sensor": {"pattern": pat, "sigma_r": model.sigma_r,
                   "sigma_i": model.sigma_i, "seed": model.seed},
    }


def scene_from_dict(data: dict):
    planes = tuple(PlaneSpec(pose=_pose_from_list(p["pose"]), width=p["width"],
                             height=p["height"], intensity=p.get("intensity", 100.0))
                   for p in data["planes"])
    markers = tuple(MarkerPlacement(
        tag_id=m["id"], plane=m["plane"], center=tuple(m["center"]),
        side=m["side"], rotation=m.get("rotation", 0.0),
        cell_grid=(np.asarray(m["cells"], dtype=np.uint8)
                   if "cells" in m else None),
        white=m.get("white"), black=m.get("black"))
        for m in data["markers"])
    scene = Scene(planes=planes, markers=markers,
                  white=data.get("white", WHITE_INTENSITY),
                  black=data.get("black", BLACK_INTENSITY))
    viewpoints = [_pose_from_list(vp) for vp in data.get("viewpoints", [])]
    sensor = data["sensor"]
    pat = sensor["pattern"]
    if pat["kind"] == "mechanical":
        pattern = Mechanical(theta_h=pat["theta_h"], theta_v=pat["theta_v"],
                             fov_h=pat.get("fov_h", np.deg2rad(120.0)),
                             fov_v=pat.get("fov_v", np.deg2rad(40.0)))
    elif pat["kind"] == "solid_state":
        pattern = SolidState(fov=pat.get("fov", np.deg2rad(70.0)),
                             samples=pat.get("samples", 40000),
                             petals=pat.get("petals", 5.0),
                             spin=pat.get("spin", 5.0 * GOLDEN_RATIO))
    else:
        raise ValueError(f"unknown pattern kind: {pat['kind']!r}")
    model = SensorModel(pattern=pattern, sigma_r=sensor.get("sigma_r", 0.0),
                        sigma_i=sensor.get("sigma_i", 0.0),
                        seed=sensor.get("seed", 0))
    return scene, viewpoints, model


def write_scene_file(path, scene: Scene, viewpoints: list[Pose],
                     model: SensorModel) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(scene_to_dict(scene, viewpoints, model), fh, indent=2,
                  sort_keys=True)
        fh.write("\n")


def read_scene_file(path):
    with open(path, encoding="ascii") as fh:
        return scene_from_dict(json.load(fh))
