"""Command-line surface: simulate, detect, locate-map, register, eval.

Exit codes: 0 on success, 2 on validation problems (bad arguments, missing
or malformed inputs), 3 on pipeline failures (detection, graph, or solver
errors). Reports are JSON with sorted keys plus a plain-text table on
stdout, so identical inputs produce byte-identical report files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cloud import PointCloud, load_cloud, write_ply
from .errors import FidmarkError
from .family import default_family, read_family
from .geom import Pose, read_poses, so3_log
from .image import ProjectionConfig, binarize, dump_images, project
from .map_locate import MapLocateConfig, locate_markers_in_map
from .marker import (
    MarkerSpec,
    ScanDetectConfig,
    detect_in_scan,
    write_observations,
)
from .metrics import (
    chamfer_and_recall,
    overlap_rate,
    registration_recall,
    relative_to_anchor,
    rmse,
)
from .registration import (
    FactorConfig,
    OptimizeOptions,
    RegisterConfig,
    merge_scans,
    register_observations,
)
from .simulator import make_dataset, read_scene_file

log = logging.getLogger(__name__)


class CliError(Exception):
    """Input validation failure; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Config file: plain `key = value` lines, '#' comments


def read_config_file(path) -> dict:
    values: dict = {}
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_value(raw)
    return values


def _parse_value(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw.strip("\"'")


def _pick(cfg: dict, args_value, key: str, default):
    """CLI argument > config file entry > default."""
    if args_value is not None:
        return args_value
    if key in cfg:
        return cfg[key]
    return default


# ---------------------------------------------------------------------------
# Shared builders


def _load_family(path):
    return read_family(path) if path else default_family()


def _detect_config(args, cfg: dict) -> ScanDetectConfig:
    theta_a = _pick(cfg, getattr(args, "theta_a", None), "theta_a", None)
    if theta_a is None:
        raise CliError("angular resolution required: --theta-a or config theta_a")
    return ScanDetectConfig(
        theta_a=float(theta_a),
        theta_i=cfg.get("theta_i"),
        scope=int(cfg.get("scope", 256)),
        step=float(cfg.get("step", 1.0)),
        blur_sigma=cfg.get("blur_sigma"),
        window=int(cfg.get("window", 8)),
    )


def _locate_config(cfg: dict) -> MapLocateConfig:
    kwargs = {}
    for key in ("neighbors", "min_cluster", "scope", "window"):
        if key in cfg:
            kwargs[key] = int(cfg[key])
    for key in ("tau_g", "cluster_tol", "buffer", "sigma_noise", "step",
                "blur_sigma", "min_cell_px"):
        if key in cfg:
            kwargs[key] = float(cfg[key])
    return MapLocateConfig(**kwargs)


def _register_config(args, cfg: dict, spec: MarkerSpec,
                     family) -> RegisterConfig:
    factors = FactorConfig(
        sigma_rot=float(cfg.get("sigma_rot", 0.02)),
        sigma_trans=float(cfg.get("sigma_trans", 0.02)),
        sigma_corner=float(cfg.get("sigma_corner", 0.01)),
        sigma_prior_rot=float(cfg.get("sigma_prior_rot", 1e-4)),
        sigma_prior_trans=float(cfg.get("sigma_prior_trans", 1e-4)),
        numeric_jacobians=bool(cfg.get("numeric_jacobians", False)),
    )
    optimizer = OptimizeOptions(
        max_iterations=int(cfg.get("max_iterations", 100)))
    return RegisterConfig(
        spec=spec, detect=_detect_config(args, cfg), family=family,
        anchor=int(cfg.get("anchor", 0)), strict=args.strict,
        factors=factors, optimizer=optimizer)


def _pose_json(pose: Pose):
    return pose.matrix().tolist()


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[k]) for r in rows)) if rows else len(h)
              for k, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[k]) for k, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(widths[k]) for k, c in enumerate(r)))
    return "\n".join(lines)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scan_paths(tokens: list[str]) -> list[Path]:
    paths: list[Path] = []
    for token in tokens:
        p = Path(token)
        if p.is_dir():
            found = sorted(list(p.glob("*.ply")) + list(p.glob("*.xyzi")))
            if not found:
                raise CliError(f"no .ply/.xyzi files in directory {p}")
            paths.extend(found)
        elif p.is_file():
            paths.append(p)
        else:
            raise CliError(f"scan input not found: {p}")
    if not paths:
        raise CliError("no scan inputs given")
    return paths


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_simulate(args, cfg: dict) -> int:
    try:
        scene, viewpoints, model = read_scene_file(args.scene)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"bad scene file {args.scene}: {exc}") from exc
    if not viewpoints:
        raise CliError("scene file lists no viewpoints")
    if args.seed is not None:
        model = replace(model, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dataset = make_dataset(scene, viewpoints, model)
    for i, cloud in enumerate(dataset.scans):
        write_ply(out / f"scan_{i:03d}.ply", cloud)
    truth = {
        "poses": [_pose_json(p) for p in dataset.poses],
        "marker_corners": {str(k): v.tolist()
                           for k, v in sorted(dataset.marker_corners.items())},
        "overlaps": [[i, j, rate]
                     for (i, j), rate in sorted(dataset.overlaps.items())],
        "seed": model.seed,
    }
    _write_json(out / "ground_truth.json", truth)
    print(f"wrote {len(dataset.scans)} scans and ground_truth.json to {out}")
    return 0


def _maybe_dump(cloud: PointCloud, det_cfg: ScanDetectConfig, dump_dir,
                stem: str) -> None:
    if dump_dir is None or len(cloud) == 0:
        return
    resolutions = det_cfg.resolutions()
    proj = ProjectionConfig.for_cloud(cloud, *resolutions)
    img = project(cloud, proj)
    lam = det_cfg.step * (det_cfg.scope // 2)
    dump_images(img, binarize(img, lam), dump_dir, stem)


def _cmd_detect(args, cfg: dict) -> int:
    cloud = load_cloud(args.scan)
    spec = MarkerSpec(side=args.marker_size)
    det_cfg = _detect_config(args, cfg)
    family = _load_family(args.family)
    observations = detect_in_scan(cloud, det_cfg, family=family, spec=spec)
    _maybe_dump(cloud, det_cfg, args.dump_images, Path(args.scan).stem)
    if args.out:
        write_observations(args.out, observations)
    rows = [[str(o.tag_id), f"{o.lam:.1f}", f"{o.e_pp:.3e}",
             " ".join(f"{x:+.3f}" for x in o.pose.translation)]
            for o in observations]
    print(_table(["id", "lambda", "e_pp", "position"], rows))
    print(f"{len(observations)} marker(s) in {args.scan}")
    return 0


def _cmd_locate_map(args, cfg: dict) -> int:
    cloud = load_cloud(args.map)
    spec = MarkerSpec(side=args.marker_size)
    family = _load_family(args.family)
    locate_cfg = _locate_config(cfg)
    observations = locate_markers_in_map(
        cloud, spec, family=family, cfg=locate_cfg,
        dump_dir=args.dump_candidates)
    if args.out:
        write_observations(args.out, observations)
    rows = [[str(o.tag_id), f"{o.e_pp:.3e}",
             " ".join(f"{x:+.3f}" for x in o.pose.translation)]
            for o in observations]
    print(_table(["id", "e_pp", "map position"], rows))
    print(f"{len(observations)} marker(s) in map {args.map}")
    return 0


def _cmd_register(args, cfg: dict) -> int:
    paths = _scan_paths(args.scans)
    if len(paths) < 2:
        raise CliError("registration needs at least 2 scans")
    scans = [load_cloud(p) for p in paths]
    spec = MarkerSpec(side=args.marker_size)
    family = _load_family(args.family)
    reg_cfg = _register_config(args, cfg, spec, family)

    def detect_one(pair):
        i, cloud = pair
        obs = detect_in_scan(cloud, reg_cfg.detect, family=family, spec=spec,
                             scan=i)
        _maybe_dump(cloud, reg_cfg.detect, args.dump_images, paths[i].stem)
        return obs

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            observations = list(pool.map(detect_one, enumerate(scans)))
    else:
        observations = [detect_one(pair) for pair in enumerate(scans)]

    result = register_observations(observations, reg_cfg)

    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            for i in sorted(result.scan_poses):
                fh.write(f"# scan {i}: {paths[i].name}\n")
                m = result.scan_poses[i].matrix()
                fh.write("\n".join(
                    " ".join(f"{x:.17g}" for x in row) for row in m))
                fh.write("\n\n")
    if args.merged:
        write_ply(args.merged, merge_scans(scans, result))
    if args.report:
        _write_json(args.report, _register_report(result))

    rows = []
    for i in sorted(result.scan_poses):
        pose = result.scan_poses[i]
        angle = float(np.linalg.norm(so3_log(pose.rotation)))
        rows.append([str(i), " ".join(f"{x:+.4f}" for x in pose.translation),
                     f"{angle:.4f}"])
    print(_table(["scan", "position", "rot angle"], rows))
    print(f"cost {result.initial_cost:.6e} -> {result.final_cost:.6e} "
          f"in {result.iterations} iteration(s)")
    if result.unreachable:
        print(f"unreachable scans: {result.unreachable}")
    return 0


def _register_report(result) -> dict:
    e_pp_table = []
    if result.graph is not None:
        e_pp_table = [
            {"scan": e.scan, "marker": e.marker, "e_pp": e.e_pp}
            for e in result.graph.edges
        ]
    return {
        "initial_cost": result.initial_cost,
        "final_cost": result.final_cost,
        "iterations": result.iterations,
        "scan_poses": {str(i): _pose_json(p)
                       for i, p in sorted(result.scan_poses.items())},
        "marker_poses": {str(j): _pose_json(p)
                         for j, p in sorted(result.marker_poses.items())},
        "corners": {f"{j}/{s}": p.tolist()
                    for (j, s), p in sorted(result.corners.items())},
        "e_pp": e_pp_table,
        "unreachable": result.unreachable,
    }


@dataclass(frozen=True)
class EvalReport:
    rmse_t: float
    rmse_r: float
    chamfer: float | None = None
    recall: float | None = None
    rr: float | None = None
    overlaps: list | None = None

    def to_dict(self) -> dict:
        return {
            "rmse_t": self.rmse_t,
            "rmse_r": self.rmse_r,
            "chamfer": self.chamfer,
            "recall": self.recall,
            "rr": self.rr,
            "overlaps": self.overlaps,
        }


def _read_truth_poses(path) -> list[Pose]:
    p = Path(path)
    if p.suffix == ".json":
        with open(p, encoding="ascii") as fh:
            data = json.load(fh)
        try:
            return [Pose.from_matrix(np.asarray(m, dtype=np.float64))
                    for m in data["poses"]]
        except (KeyError, TypeError) as exc:
            raise CliError(f"{path}: expected a 'poses' list of 4x4 matrices") from exc
    return read_poses(p)


def _cmd_eval(args, cfg: dict) -> int:
    estimates = read_poses(args.estimates)
    truth = _read_truth_poses(args.truth)
    if len(estimates) != len(truth):
        raise CliError(f"{len(estimates)} estimated poses vs {len(truth)} truths")
    est_rel = relative_to_anchor(estimates)
    truth_rel = relative_to_anchor(truth)
    rmse_t, rmse_r = rmse(est_rel, truth_rel)

    chamfer = recall = None
    if args.est_cloud and args.ref_cloud:
        cd_clouds = load_cloud(args.est_cloud), load_cloud(args.ref_cloud)
        chamfer, recall = chamfer_and_recall(*cd_clouds, thr=args.thr,
                                             mean=args.mean)
    rr = registration_recall([(rmse_t, rmse_r)], args.thr_t, args.thr_r)

    overlaps = None
    if args.scans:
        paths = _scan_paths(args.scans)
        if len(paths) != len(estimates):
            raise CliError("scan count does not match pose count")
        world = [load_cloud(p).transformed(est)
                 for p, est in zip(paths, est_rel)]
        overlaps = [
            [i, j, overlap_rate(world[i], world[j], tau=args.tau)]
            for i in range(len(world)) for j in range(i + 1, len(world))
            if len(world[i]) and len(world[j])
        ]

    report = EvalReport(rmse_t=rmse_t, rmse_r=rmse_r, chamfer=chamfer,
                        recall=recall, rr=rr, overlaps=overlaps)
    if args.report:
        _write_json(args.report, report.to_dict())
    if args.plots:
        _emit_plots(est_rel, truth_rel, Path(args.plots))

    rows = [["RMSE_T (m)", f"{rmse_t:.6f}"], ["RMSE_R (rad)", f"{rmse_r:.6f}"],
            ["RR", f"{rr:.2f}"]]
    if chamfer is not None:
        rows += [["Chamfer", f"{chamfer:.6f}"], ["Recall", f"{recall:.4f}"]]
    if overlaps:
        mean_overlap = float(np.mean([o[2] for o in overlaps]))
        min_overlap = float(min(o[2] for o in overlaps))
        rows += [["Avg overlap", f"{mean_overlap:.4f}"],
                 ["Min overlap", f"{min_overlap:.4f}"]]
    print(_table(["metric", "value"], rows))
    return 0


def _emit_plots(estimates: list[Pose], truth: list[Pose], out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    est_xy = np.array([p.translation[:2] for p in estimates])
    tru_xy = np.array([p.translation[:2] for p in truth])

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(tru_xy[:, 0], tru_xy[:, 1], "o-", label="truth")
    ax.plot(est_xy[:, 0], est_xy[:, 1], "x--", label="estimated")
    for e, t in zip(est_xy, tru_xy):
        ax.plot([e[0], t[0]], [e[1], t[1]], color="gray", lw=0.5)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("scan positions, anchor frame")
    ax.legend()
    ax.set_aspect("equal", adjustable="datalim")
    fig.savefig(out / "trajectory.svg")
    plt.close(fig)

    errors = [float(np.linalg.norm(e.translation - t.translation))
              for e, t in zip(estimates, truth)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(errors, bins=max(5, len(errors)), color="steelblue")
    ax.set_xlabel("translation error (m)")
    ax.set_ylabel("scans")
    ax.set_title("per-scan pose error")
    fig.savefig(out / "error_hist.svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fidmark",
        description="Fiducial-marker detection, map localization, and "
                    "multiview point cloud registration.")
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("--seed", type=int, help="override the scene seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-scan detection")
    parser.add_argument("--strict", action="store_true",
                        help="fail instead of skipping unreachable scans")
    parser.add_argument("--dump-images", metavar="DIR",
                        help="write projected intensity/range/binary images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene file to scans")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("detect", help="detect markers in one scan")
    p.add_argument("--scan", required=True, help="point cloud (.ply/.xyzi)")
    p.add_argument("--marker-size", type=float, required=True,
                   help="marker side length in meters")
    p.add_argument("--family", help="marker dictionary file (default built-in)")
    p.add_argument("--theta-a", type=float,
                   help="azimuth resolution in radians")
    p.add_argument("--out", help="write detections as JSON lines")

    p = sub.add_parser("locate-map", help="find markers in a full map cloud")
    p.add_argument("--map", required=True, help="map point cloud (.ply/.xyzi)")
    p.add_argument("--marker-size", type=float, required=True)
    p.add_argument("--family")
    p.add_argument("--out", help="write detections as JSON lines")
    p.add_argument("--dump-candidates", metavar="DIR",
                   help="write per-candidate intermediate-plane images")

    p = sub.add_parser("register", help="register unordered scans via markers")
    p.add_argument("--scans", nargs="+", required=True,
                   help="scan files or directories")
    p.add_argument("--marker-size", type=float, required=True)
    p.add_argument("--family")
    p.add_argument("--theta-a", type=float)
    p.add_argument("--out", help="write per-scan poses as text blocks")
    p.add_argument("--merged", help="write the merged cloud as PLY")
    p.add_argument("--report", help="write the registration report JSON")

    p = sub.add_parser("eval", help="score estimated poses against truth")
    p.add_argument("--estimates", required=True, help="poses text file")
    p.add_argument("--truth", required=True,
                   help="poses text file or ground_truth.json")
    p.add_argument("--est-cloud", help="estimated merged cloud")
    p.add_argument("--ref-cloud", help="reference cloud")
    p.add_argument("--thr", type=float, default=0.0025,
                   help="squared-distance recall threshold (m^2)")
    p.add_argument("--mean", action="store_true",
                   help="divide each Chamfer term by its cloud size")
    p.add_argument("--thr-t", type=float, default=0.05,
                   help="RMSE_T success threshold (m)")
    p.add_argument("--thr-r", type=float, default=0.05,
                   help="RMSE_R success threshold (rad)")
    p.add_argument("--tau", type=float, default=0.05,
                   help="overlap distance tolerance (m)")
    p.add_argument("--scans", nargs="+",
                   help="scan files for pairwise overlap rates")
    p.add_argument("--report", help="write the evaluation report JSON")
    p.add_argument("--plots", metavar="DIR", help="write SVG plots")

    return parser


_HANDLERS = {
    "simulate": _cmd_simulate,
    "detect": _cmd_detect,
    "locate-map": _cmd_locate_map,
    "register": _cmd_register,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = read_config_file(args.config) if args.config else {}
        return _HANDLERS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FidmarkError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
