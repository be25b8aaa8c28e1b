"""Fiducial markers for LiDAR: detection in scans, localization in maps,
and marker-based multiview registration."""

__version__ = "0.1.0"

from .cloud import (
    OrientedBox,
    PointCloud,
    load_cloud,
    read_ply,
    read_xyzi,
    write_ply,
)
from .errors import FidmarkError
from .family import TagFamily, default_family
from .geom import Pose, align_svd, read_poses, se3_ominus, so3_exp, so3_log, write_poses
from .image import BinaryImage, IntensityImage, ProjectionConfig, binarize, project
from .map_locate import MapLocateConfig, locate_markers_in_map
from .marker import (
    MarkerObservation,
    MarkerSpec,
    ScanDetectConfig,
    adaptive_detect,
    corner_to_3d,
    detect_in_scan,
    estimate_marker_pose,
    read_observations,
    write_observations,
)
from .metrics import chamfer_and_recall, registration_recall, relative_to_anchor, rmse
from .registration import (
    FactorConfig,
    OptimizeOptions,
    RegisterConfig,
    RegistrationResult,
    merge_scans,
    register,
    register_observations,
)
from .simulator import (
    MarkerPlacement,
    Mechanical,
    PlaneSpec,
    Scene,
    SensorModel,
    SolidState,
    make_dataset,
    plane_facing,
    read_scene_file,
    sample_map,
    sample_scan,
    write_scene_file,
)

__all__ = [
    "BinaryImage",
    "FactorConfig",
    "FidmarkError",
    "IntensityImage",
    "MapLocateConfig",
    "MarkerObservation",
    "MarkerPlacement",
    "MarkerSpec",
    "Mechanical",
    "OptimizeOptions",
    "OrientedBox",
    "PlaneSpec",
    "PointCloud",
    "Pose",
    "ProjectionConfig",
    "RegisterConfig",
    "RegistrationResult",
    "ScanDetectConfig",
    "Scene",
    "SensorModel",
    "SolidState",
    "TagFamily",
    "adaptive_detect",
    "align_svd",
    "binarize",
    "chamfer_and_recall",
    "corner_to_3d",
    "default_family",
    "detect_in_scan",
    "estimate_marker_pose",
    "load_cloud",
    "locate_markers_in_map",
    "make_dataset",
    "merge_scans",
    "plane_facing",
    "project",
    "read_observations",
    "read_ply",
    "read_poses",
    "read_scene_file",
    "read_xyzi",
    "register",
    "register_observations",
    "registration_recall",
    "relative_to_anchor",
    "rmse",
    "sample_map",
    "sample_scan",
    "se3_ominus",
    "so3_exp",
    "so3_log",
    "write_observations",
    "write_ply",
    "write_poses",
    "write_scene_file",
]
