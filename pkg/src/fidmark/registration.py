"""Multiview registration through shared markers, without initial guesses.

Two levels. The first treats scans and markers as nodes of a weighted
bipartite graph (weight = marker fit residual e_pp) and chains relative
poses along Dijkstra shortest paths from an anchor scan, giving every
reachable scan an initial global pose. The second refines everything
jointly: a factor graph over scan poses, marker poses, and marker corner
positions is solved by Levenberg-Marquardt for the MAP estimate.

Pose variables live on SE(3): a step delta = (omega, v) moves a pose T to
T * (exp(hat(omega)), v), which is the exact inverse of the se3_ominus
chart used by the pose residuals. Point variables update additively.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import PointCloud
from .errors import (
    DisconnectedInput,
    IllPosedGraph,
    MissingInitial,
    NoObservations,
    NonFiniteCost,
)
from .family import TagFamily
from .geom import Pose, hat, se3_ominus, so3_exp, so3_log
from .marker import MarkerObservation, MarkerSpec, ScanDetectConfig, detect_in_scan

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# First level: weighted scan-marker graph and shortest-path initialization


@dataclass(frozen=True)
class GraphEdge:
    scan: int
    marker: int
    pose: Pose        # marker frame -> scan frame
    e_pp: float

    @property
    def weight(self) -> float:
        return max(self.e_pp, WEIGHT_FLOOR)


@dataclass(frozen=True)
class FirstLevelGraph:
    n_scans: int
    markers: tuple[int, ...]       # sorted tag ids
    edges: tuple[GraphEdge, ...]   # unique (scan, marker), sorted
    anchor: int = 0

    def edge_map(self) -> dict[tuple[int, int], GraphEdge]:
        return {(e.scan, e.marker): e for e in self.edges}


def build_first_level(observations: list[list[MarkerObservation]],
                      anchor: int = 0) -> FirstLevelGraph:
    """Bipartite graph of scans and markers; parallel edges keep lowest e_pp."""
    if not any(observations):
        raise NoObservations("no scan produced a marker observation")
    best: dict[tuple[int, int], MarkerObservation] = {}
    for scan, obs_list in enumerate(observations):
        for obs in obs_list:
            key = (scan, obs.tag_id)
            old = best.get(key)
            if old is None or obs.e_pp < old.e_pp:
                best[key] = obs
    edges = tuple(
        GraphEdge(scan=scan, marker=marker, pose=best[(scan, marker)].pose,
                  e_pp=best[(scan, marker)].e_pp)
        for scan, marker in sorted(best))
    markers = tuple(sorted({e.marker for e in edges}))
    return FirstLevelGraph(n_scans=len(observations), markers=markers,
                           edges=edges, anchor=anchor)


def _node_indices(g: FirstLevelGraph):
    """Scans take indices 0..n-1, markers follow in sorted-id order."""
    marker_index = {m: g.n_scans + k for k, m in enumerate(g.markers)}
    return marker_index


def shortest_paths(g: FirstLevelGraph) -> dict[int, tuple[int, ...]]:
    """Dijkstra from the anchor over node indices.

    Returns, for every reachable node index, the optimal path as a node
    index tuple. Equal-cost ties pick the lexicographically smallest index
    sequence.
    """
    marker_index = _node_indices(g)
    adjacency: dict[int, list[tuple[int, GraphEdge]]] = {}
    for e in g.edges:
        m = marker_index[e.marker]
        adjacency.setdefault(e.scan, []).append((m, e))
        adjacency.setdefault(m, []).append((e.scan, e))
    for nbrs in adjacency.values():
        nbrs.sort(key=lambda pair: pair[0])

    start = g.anchor
    settled: dict[int, tuple[int, ...]] = {}
    heap = [(0.0, (start,))]
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled[node] = path
        for nbr, edge in adjacency.get(node, []):
            if nbr not in settled:
                heapq.heappush(heap, (dist + edge.weight, path + (nbr,)))
    return settled


def initial_poses(g: FirstLevelGraph) -> tuple[dict[int, Pose], list[int]]:
    """Chain relative poses along shortest paths from the anchor.

    A path alternates scan and marker nodes; each marker hop j between
    scans a and b contributes T_a^j (T_b^j)^-1. Returns global poses for
    every reachable scan (anchor = identity) and the sorted list of
    unreachable scan indices.
    """
    paths = shortest_paths(g)
    edge_map = g.edge_map()
    index_marker = {g.n_scans + k: m for k, m in enumerate(g.markers)}

    poses: dict[int, Pose] = {}
    for node, path in paths.items():
        if node >= g.n_scans:
            continue
        pose = Pose.identity()
        for k in range(2, len(path), 2):
            scan_prev, marker_node, scan_next = path[k - 2], path[k - 1], path[k]
            marker = index_marker[marker_node]
            t_prev = edge_map[(scan_prev, marker)].pose
            t_next = edge_map[(scan_next, marker)].pose
            pose = pose @ t_prev @ t_next.inverse()
        poses[node] = pose
    unreachable = sorted(set(range(g.n_scans)) - set(poses))
    return poses, unreachable


# ---------------------------------------------------------------------------
# Second level: factor graph


@dataclass(frozen=True)
class FactorConfig:
    sigma_rot: float = 0.02        # pose-factor rotation sigma (rad)
    sigma_trans: float = 0.02      # pose-factor translation sigma (m)
    sigma_corner: float = 0.01     # corner position sigma (m)
    sigma_prior_rot: float = 1e-4
    sigma_prior_trans: float = 1e-4
    numeric_jacobians: bool = False  # central differences for pose factors


def _so3_jr_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at rotation vector phi."""
    theta = np.linalg.norm(phi)
    k = hat(phi)
    if theta < 1e-5:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coeff = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * k + coeff * (k @ k)


def _retract_pose(pose: Pose, delta: np.ndarray) -> Pose:
    return pose @ Pose(so3_exp(delta[:3]), delta[3:])


class Factor:
    """Residual block over an ordered tuple of variables.

    Subclasses provide raw residuals and per-variable Jacobians in the
    variables' local charts; whitening by the per-component sigma happens
    in the solver.
    """

    kind: str
    vars: tuple
    sigma: np.ndarray

    def residual(self, values: dict) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, values: dict) -> list[np.ndarray]:
        raise NotImplementedError

    def _var_dim(self, key) -> int:
        return 6 if key[0] in ("scan", "marker") else 3

    def numeric_jacobians(self, values: dict, step: float = 1e-6) -> list[np.ndarray]:
        """Central-difference Jacobians in the same charts as the solver."""
        jacs = []
        r0 = self.residual(values)
        for key in self.vars:
            dim = self._var_dim(key)
            j = np.zeros((len(r0), dim))
            for col in range(dim):
                d = np.zeros(dim)
                d[col] = step
                values_p = dict(values)
                values_m = dict(values)
                if dim == 6:
                    values_p[key] = _retract_pose(values[key], d)
                    values_m[key] = _retract_pose(values[key], -d)
                else:
                    values_p[key] = values[key] + d
                    values_m[key] = values[key] - d
                j[:, col] = (self.residual(values_p)
                             - self.residual(values_m)) / (2.0 * step)
            jacs.append(j)
        return jacs


class PriorFactor(Factor):
    kind = "prior"

    def __init__(self, var, z: Pose, sigma_rot: float, sigma_trans: float):
        self.vars = (var,)
        self.z = z
        self.sigma = np.array([sigma_rot] * 3 + [sigma_trans] * 3)

    def residual(self, values):
        return se3_ominus(values[self.vars[0]], self.z)

    def jacobians(self, values):
        rel = self.z.inverse() @ values[self.vars[0]]
        j = np.zeros((6, 6))
        j[:3, :3] = _so3_jr_inv(so3_log(rel.rotation))
        j[3:, 3:] = rel.rotation
        return [j]


class RelPoseFactor(Factor):
    """Residual (T_a^-1 T_b) ominus z over two pose variables."""

    def __init__(self, var_a, var_b, z: Pose, sigma_rot: float,
                 sigma_trans: float, kind: str):
        self.vars = (var_a, var_b)
        self.z = z
        self.sigma = np.array([sigma_rot] * 3 + [sigma_trans] * 3)
        self.kind = kind

    def residual(self, values):
        t_a, t_b = values[self.vars[0]], values[self.vars[1]]
        return se3_ominus(t_a.inverse() @ t_b, self.z)

    def jacobians(self, values):
        t_a, t_b = values[self.vars[0]], values[self.vars[1]]
        n = t_a.inverse() @ t_b                    # measured relative pose
        rel = self.z.inverse() @ n
        phi = so3_log(rel.rotation)
        jr_inv = _so3_jr_inv(phi)
        z_rot = self.z.rotation.T

        j_b = np.zeros((6, 6))
        j_b[:3, :3] = jr_inv
        j_b[3:, 3:] = rel.rotation

        j_a = np.zeros((6, 6))
        j_a[:3, :3] = -jr_inv @ n.rotation.T
        j_a[3:, :3] = z_rot @ hat(n.translation)
        j_a[3:, 3:] = -z_rot
        return [j_a, j_b]


class PointInFrameFactor(Factor):
    """Residual (T^-1 p) - z over a pose variable and a point variable."""

    def __init__(self, pose_var, point_var, z: np.ndarray, sigma: float, kind: str):
        self.vars = (pose_var, point_var)
        self.z = np.asarray(z, dtype=np.float64)
        self.sigma = np.full(3, sigma)
        self.kind = kind

    def residual(self, values):
        t = values[self.vars[0]]
        p = values[self.vars[1]]
        return t.inverse().apply(p) - self.z

    def jacobians(self, values):
        t = values[self.vars[0]]
        p = values[self.vars[1]]
        y = t.inverse().apply(p)
        j_pose = np.zeros((3, 6))
        j_pose[:, :3] = hat(y)
        j_pose[:, 3:] = -np.eye(3)
        j_point = t.rotation.T
        return [j_pose, j_point]


@dataclass
class FactorGraph:
    variables: dict            # key -> Pose or np.ndarray(3), insertion order
    factors: list[Factor]
    anchor: int
    config: FactorConfig

    def variable_slices(self) -> tuple[dict, int]:
        slices, offset = {}, 0
        for key in self.variables:
            dim = 6 if key[0] in ("scan", "marker") else 3
            slices[key] = slice(offset, offset + dim)
            offset += dim
        return slices, offset


def build_factor_graph(observations: list[list[MarkerObservation]],
                       initials: dict[int, Pose],
                       spec: MarkerSpec,
                       anchor: int = 0,
                       config: FactorConfig | None = None) -> FactorGraph:
    """Assemble the joint refinement problem.

    Variables: one pose per scan with observations, one pose per marker,
    four corner points per marker (all in the anchor's global frame).
    Factors: an anchor prior, one pose measurement per observation, one
    scan-frame factor per observed corner, one canonical-corner factor per
    marker corner, and a relative-pose factor anchor vs each other scan.
    Marker poses start from their lowest-e_pp observer; corners from the
    marker pose applied to the canonical square.
    """
    if config is None:
        config = FactorConfig()

    scans = [i for i, obs in enumerate(observations) if obs]
    if anchor not in initials:
        raise MissingInitial(f"anchor scan {anchor} has no initial pose")
    for i in scans:
        if i not in initials:
            raise MissingInitial(f"scan {i} observes markers but has no initial pose")

    best_observer: dict[int, MarkerObservation] = {}
    best_scan: dict[int, int] = {}
    for i in scans:
        for obs in observations[i]:
            old = best_observer.get(obs.tag_id)
            if old is None or obs.e_pp < old.e_pp:
                best_observer[obs.tag_id] = obs
                best_scan[obs.tag_id] = i
    marker_ids = sorted(best_observer)

    variables: dict = {}
    for i in sorted(set(scans) | {anchor}):
        variables[("scan", i)] = initials[i]
    corners_local = spec.corners_local()
    for j in marker_ids:
        t_marker = initials[best_scan[j]] @ best_observer[j].pose
        variables[("marker", j)] = t_marker
        for s in range(4):
            variables[("corner", j, s)] = t_marker.apply(corners_local[s])

    factors: list[Factor] = [
        PriorFactor(("scan", anchor), initials[anchor],
                    config.sigma_prior_rot, config.sigma_prior_trans)
    ]
    for i in scans:
        for obs in observations[i]:
            factors.append(RelPoseFactor(
                ("scan", i), ("marker", obs.tag_id), obs.pose,
                config.sigma_rot, config.sigma_trans, kind="pose_meas"))
            for s in range(4):
                factors.append(PointInFrameFactor(
                    ("scan", i), ("corner", obs.tag_id, s),
                    obs.corners_3d[s], config.sigma_corner, kind="corner_scan"))
    for j in marker_ids:
        for s in range(4):
            factors.append(PointInFrameFactor(
                ("marker", j), ("corner", j, s),
                corners_local[s], config.sigma_corner, kind="corner_local"))
    for i in sorted(set(scans) | {anchor}):
        if i == anchor:
            continue
        z_rel = initials[anchor].inverse() @ initials[i]
        factors.append(RelPoseFactor(
            ("scan", anchor), ("scan", i), z_rel,
            config.sigma_rot, config.sigma_trans, kind="relative"))
    return FactorGraph(variables=variables, factors=factors, anchor=anchor,
                       config=config)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass(frozen=True)
class OptimizeOptions:
    max_iterations: int = 100
    rel_decrease: float = 1e-9
    step_tol: float = 1e-10
    mu_init: float = 1e-4
    mu_max: float = 1e15


@dataclass(frozen=True)
class RegistrationResult:
    scan_poses: dict[int, Pose]
    marker_poses: dict[int, Pose]
    corners: dict[tuple[int, int], np.ndarray]
    initial_cost: float
    final_cost: float
    iterations: int
    unreachable: list[int] = field(default_factory=list)
    graph: FirstLevelGraph | None = None


def _whitened(fg: FactorGraph, values: dict):
    slices, dim = fg.variable_slices()
    rows = sum(len(f.sigma) for f in fg.factors)
    r = np.empty(rows)
    jac = np.zeros((rows, dim))
    use_numeric = fg.config.numeric_jacobians
    row = 0
    for f in fg.factors:
        res = f.residual(values)
        n = len(res)
        r[row:row + n] = res / f.sigma
        pose_factor = isinstance(f, (PriorFactor, RelPoseFactor))
        js = (f.numeric_jacobians(values) if (use_numeric and pose_factor)
              else f.jacobians(values))
        for key, j in zip(f.vars, js):
            jac[row:row + n, slices[key]] += j / f.sigma[:, None]
        row += n
    return r, jac


def _cost_only(fg: FactorGraph, values: dict) -> float:
    total = 0.0
    for f in fg.factors:
        w = f.residual(values) / f.sigma
        total += float(w @ w)
    return 0.5 * total


def _apply_step(fg: FactorGraph, values: dict, delta: np.ndarray) -> dict:
    slices, _ = fg.variable_slices()
    out = {}
    for key, value in values.items():
        d = delta[slices[key]]
        if key[0] in ("scan", "marker"):
            out[key] = _retract_pose(value, d)
        else:
            out[key] = value + d
    return out


def _check_well_posed(fg: FactorGraph) -> None:
    if not any(isinstance(f, PriorFactor) for f in fg.factors):
        raise IllPosedGraph("no prior factor: the gauge is free")
    touched = {key for f in fg.factors for key in f.vars}
    loose = [key for key in fg.variables if key not in touched]
    if loose:
        raise IllPosedGraph(f"variables without any factor: {loose}")
    missing = [key for f in fg.factors for key in f.vars
               if key not in fg.variables]
    if missing:
        raise IllPosedGraph(f"factors reference unknown variables: {missing}")


def optimize(fg: FactorGraph, opts: OptimizeOptions | None = None) -> RegistrationResult:
    """Levenberg-Marquardt MAP solve of the factor graph.

    Damping scales the normal-equation diagonal; mu starts at 1e-4, grows
    x10 on a rejected trial and shrinks /10 on acceptance. Accepted steps
    strictly decrease the cost. Terminates on relative cost decrease below
    1e-9, step norm below 1e-10, or 100 iterations.
    """
    if opts is None:
        opts = OptimizeOptions()
    _check_well_posed(fg)

    values = dict(fg.variables)
    cost = _cost_only(fg, values)
    if not np.isfinite(cost):
        raise NonFiniteCost(f"initial cost is {cost}")
    initial_cost = cost

    mu = opts.mu_init
    iterations = 0
    while iterations < opts.max_iterations:
        iterations += 1
        r, jac = _whitened(fg, values)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.maximum(np.diag(jtj), 1e-12)

        accepted = False
        while mu <= opts.mu_max:
            try:
                delta = np.linalg.solve(jtj + mu * np.diag(diag), -jtr)
            except np.linalg.LinAlgError as exc:
                raise IllPosedGraph("normal equations are singular") from exc
            candidate = _apply_step(fg, values, delta)
            new_cost = _cost_only(fg, candidate)
            if not np.isfinite(new_cost):
                raise NonFiniteCost(f"cost became {new_cost}")
            if new_cost < cost:
                accepted = True
                mu /= 10.0
                break
            mu *= 10.0
        if not accepted:
            break  # damping exhausted: no descent direction left

        prev_cost = cost
        values, cost = candidate, new_cost
        if prev_cost - cost < opts.rel_decrease * max(prev_cost, 1e-300):
            break
        if np.linalg.norm(delta) < opts.step_tol:
            break

    scan_poses = {key[1]: v for key, v in values.items() if key[0] == "scan"}
    marker_poses = {key[1]: v for key, v in values.items() if key[0] == "marker"}
    corners = {(key[1], key[2]): v for key, v in values.items()
               if key[0] == "corner"}
    return RegistrationResult(
        scan_poses=scan_poses, marker_poses=marker_poses, corners=corners,
        initial_cost=initial_cost, final_cost=cost, iterations=iterations)


# ---------------------------------------------------------------------------
# End-to-end registration


@dataclass(frozen=True)
class RegisterConfig:
    spec: MarkerSpec
    detect: ScanDetectConfig | None = None   # required by register()
    family: TagFamily | None = None
    anchor: int = 0
    strict: bool = False
    factors: FactorConfig = field(default_factory=FactorConfig)
    optimizer: OptimizeOptions = field(default_factory=OptimizeOptions)


def register_observations(observations: list[list[MarkerObservation]],
                          cfg: RegisterConfig) -> RegistrationResult:
    """Registration from already-detected observations (one list per scan)."""
    graph = build_first_level(observations, anchor=cfg.anchor)
    initials, unreachable = initial_poses(graph)
    if unreachable and cfg.strict:
        raise DisconnectedInput(f"unreachable scans: {unreachable}")
    if unreachable:
        log.warning("scans %s share no marker chain with the anchor; skipped",
                    unreachable)
    reachable_obs = [obs if i in initials else [] for i, obs in enumerate(observations)]
    fg = build_factor_graph(reachable_obs, initials, cfg.spec,
                            anchor=cfg.anchor, config=cfg.factors)
    result = optimize(fg, cfg.optimizer)
    return replace(result, unreachable=unreachable, graph=graph)


def register(scans: list[PointCloud], cfg: RegisterConfig) -> RegistrationResult:
    """Detect markers in every scan, then solve the two-level problem."""
    if len(scans) < 2:
        raise ValueError("registration needs at least 2 scans")
    if cfg.detect is None:
        raise ValueError("register() needs a ScanDetectConfig in cfg.detect")
    observations = [
        detect_in_scan(cloud, cfg.detect, family=cfg.family, spec=cfg.spec,
                       scan=i)
        for i, cloud in enumerate(scans)
    ]
    return register_observations(observations, cfg)


def merge_scans(scans: list[PointCloud], result: RegistrationResult) -> PointCloud:
    """All reachable scans transformed into the anchor frame, concatenated."""
    merged = PointCloud.empty()
    for i, cloud in enumerate(scans):
        if i in result.scan_poses:
            merged = merged.concatenated(cloud.transformed(result.scan_poses[i]))
    return merged
