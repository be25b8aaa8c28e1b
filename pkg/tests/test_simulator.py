"""Simulator: ray-plane exactness, marker painting, patterns, determinism."""

import numpy as np
import pytest

from fidmark.family import default_family
from fidmark.geom import Pose, so3_exp
from fidmark.image import ProjectionConfig, project
from fidmark.simulator import (
    Dataset,
    Mechanical,
    MarkerPlacement,
    PlaneSpec,
    Scene,
    SensorModel,
    SolidState,
    make_dataset,
    plane_facing,
    read_scene_file,
    sample_map,
    sample_scan,
    scene_from_dict,
    scene_to_dict,
    synthetic_observations,
    write_scene_file,
)

FAMILY = default_family()
DEG = np.pi / 180.0


def single_plane_scene(distance=5.0, width=4.0, height=3.0, markers=()):
    plane = PlaneSpec(pose=plane_facing([distance, 0.0, 0.0], [0.0, 0.0, 0.0]),
                      width=width, height=height)
    return Scene(planes=(plane,), markers=tuple(markers))


def test_ray_plane_ranges_exact():
    scene = single_plane_scene(distance=5.0, width=20.0, height=20.0)
    model = SensorModel(pattern=Mechanical(theta_h=1.0 * DEG, theta_v=1.0 * DEG,
                                           fov_h=40 * DEG, fov_v=30 * DEG))
    cloud = sample_scan(scene, Pose.identity(), model)
    assert len(cloud) > 0
    # Analytic intersection: the plane is x = 5, so s = 5 / d_x per ray.
    dirs = cloud.xyz / np.linalg.norm(cloud.xyz, axis=1, keepdims=True)
    expected = 5.0 / dirs[:, 0]
    assert np.allclose(np.linalg.norm(cloud.xyz, axis=1), expected, atol=1e-9)


def test_marker_cells_painted_correctly():
    placement = MarkerPlacement(tag_id=7, plane=0, center=(0.1, -0.05),
                                side=0.692, rotation=0.3)
    scene = single_plane_scene(distance=4.0, markers=[placement])
    model = SensorModel(pattern=Mechanical(theta_h=0.1 * DEG, theta_v=0.1 * DEG,
                                           fov_h=30 * DEG, fov_v=24 * DEG))
    cloud = sample_scan(scene, Pose.identity(), model)
    marked = np.isin(cloud.intensity, [30.0, 220.0])
    assert np.any(marked) and np.any(~marked)
    assert set(np.unique(cloud.intensity)) == {30.0, 100.0, 220.0}

    # Independent oracle: map each painted point into the marker frame and
    # look up its cell in the family pattern.
    grid = FAMILY.full_grid(7)
    cells = grid.shape[0]
    cell = placement.side / cells
    inv = scene.marker_pose_world(placement).inverse()
    local = inv.apply(cloud.xyz[marked])
    assert np.abs(local[:, 2]).max() < 1e-9  # on the sheet
    half = placement.side / 2.0
    col = np.clip(((local[:, 0] + half) / cell).astype(int), 0, cells - 1)
    row = np.clip(((half - local[:, 1]) / cell).astype(int), 0, cells - 1)
    expected = np.where(grid[row, col] > 0, 220.0, 30.0)
    assert np.array_equal(cloud.intensity[marked], expected)


def test_sensor_facing_away_empty():
    plane = PlaneSpec(pose=plane_facing([-5.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
                      width=4.0, height=4.0)
    scene = Scene(planes=(plane,))
    model = SensorModel(pattern=Mechanical(theta_h=1 * DEG, theta_v=1 * DEG,
                                           fov_h=90 * DEG, fov_v=30 * DEG))
    cloud = sample_scan(scene, Pose.identity(), model)
    assert len(cloud) == 0


def test_thin_sheet_geometry_invariance():
    placement = MarkerPlacement(tag_id=3, plane=0, center=(0.0, 0.0), side=0.692)
    with_marker = single_plane_scene(distance=4.0, markers=[placement])
    without = single_plane_scene(distance=4.0)
    model = SensorModel(pattern=Mechanical(theta_h=0.2 * DEG, theta_v=0.2 * DEG,
                                           fov_h=30 * DEG, fov_v=24 * DEG),
                        sigma_r=0.004, seed=9)
    a = sample_scan(with_marker, Pose.identity(), model)
    b = sample_scan(without, Pose.identity(), model)
    assert np.array_equal(a.xyz, b.xyz)
    assert not np.array_equal(a.intensity, b.intensity)


def test_scan_determinism_and_seed_separation():
    scene = single_plane_scene(distance=4.0)
    model = SensorModel(pattern=Mechanical(theta_h=0.5 * DEG, theta_v=0.5 * DEG,
                                           fov_h=30 * DEG, fov_v=20 * DEG),
                        sigma_r=0.01, sigma_i=2.0, seed=3)
    a = sample_scan(scene, Pose.identity(), model, scan_index=1)
    b = sample_scan(scene, Pose.identity(), model, scan_index=1)
    c = sample_scan(scene, Pose.identity(), model, scan_index=2)
    assert np.array_equal(a.xyz, b.xyz) and np.array_equal(a.intensity, b.intensity)
    assert not np.array_equal(a.xyz, c.xyz)


def test_mechanical_grid_gap_free():
    scene = single_plane_scene(distance=4.0, width=6.0, height=4.0)
    step = 0.2 * DEG
    model = SensorModel(pattern=Mechanical(theta_h=step, theta_v=step,
                                           fov_h=30 * DEG, fov_v=20 * DEG))
    cloud = sample_scan(scene, Pose.identity(), model)
    cfg = ProjectionConfig.for_cloud(cloud, step, step)
    img = project(cloud, cfg)
    assert img.observed.all()


def test_solid_state_leaves_spots_then_fills():
    scene = single_plane_scene(distance=3.0, width=8.0, height=8.0)
    sparse = SensorModel(pattern=SolidState(fov=40 * DEG, samples=20000))
    cloud = sample_scan(scene, Pose.identity(), sparse)
    step = 0.25 * DEG
    img = project(cloud, ProjectionConfig.for_cloud(cloud, step, step))
    coverage = img.observed.mean()
    assert coverage < 0.999

    dense = SensorModel(pattern=SolidState(fov=40 * DEG, samples=400000))
    cloud2 = sample_scan(scene, Pose.identity(), dense)
    img2 = project(cloud2, ProjectionConfig.for_cloud(cloud2, step, step))
    assert img2.observed.mean() > coverage


def test_sample_map_points_on_planes():
    placement = MarkerPlacement(tag_id=12, plane=0, center=(0.0, 0.0), side=0.692)
    scene = Scene(planes=(
        PlaneSpec(pose=plane_facing([4.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
                  width=3.0, height=2.0),
        PlaneSpec(pose=plane_facing([0.0, 5.0, 0.0], [0.0, 0.0, 0.0]),
                  width=2.0, height=2.0),
    ), markers=(placement,))
    cloud = sample_map(scene, spacing=0.05)
    assert len(cloud) > 0
    dist_any = np.full(len(cloud), np.inf)
    for plane in scene.planes:
        d = np.abs((cloud.xyz - plane.pose.translation) @ plane.normal)
        dist_any = np.minimum(dist_any, d)
    assert dist_any.max() < 1e-12
    assert {30.0, 220.0} <= set(np.unique(cloud.intensity))


def test_dataset_bookkeeping_and_overlap():
    # Two viewpoints whose plane footprints overlap by half.
    plane = PlaneSpec(pose=plane_facing([3.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
                      width=12.0, height=2.0)
    scene = Scene(planes=(plane,))
    fov_h = 2.0 * np.arctan(2.0 / 3.0)
    model = SensorModel(pattern=Mechanical(theta_h=0.2 * DEG, theta_v=0.2 * DEG,
                                           fov_h=fov_h, fov_v=20 * DEG))
    shift = Pose(rotation=np.eye(3), translation=np.array([0.0, 2.0, 0.0]))
    data = make_dataset(scene, [Pose.identity(), shift], model)
    assert len(data.scans) == 2
    assert np.allclose(data.poses[1].translation, [0.0, 2.0, 0.0], atol=0)
    assert abs(data.overlaps[(0, 1)] - 0.5) < 0.05


def test_synthetic_observations_ground_truth():
    placement = MarkerPlacement(tag_id=5, plane=0, center=(0.2, 0.1), side=0.692)
    scene = single_plane_scene(distance=4.0, markers=[placement])
    vp = Pose(rotation=so3_exp(np.array([0.0, 0.0, 0.1])),
              translation=np.array([0.3, -0.2, 0.05]))
    obs = synthetic_observations(scene, [Pose.identity(), vp], sigma_corner=0.0)
    assert len(obs) == 2 and len(obs[0]) == 1 and len(obs[1]) == 1
    truth_world = scene.marker_corners_world(placement)
    assert np.allclose(obs[0][0].corners_3d, truth_world, atol=1e-12)
    assert np.allclose(vp.apply(obs[1][0].corners_3d), truth_world, atol=1e-12)
    assert obs[0][0].e_pp < 1e-16

    # Same marker seen from behind: nothing.
    behind = Pose(rotation=np.eye(3), translation=np.array([8.0, 0.0, 0.0]))
    assert synthetic_observations(scene, [behind])[0] == []

    # Out of the field of view: nothing.
    narrow = Mechanical(theta_h=0.1 * DEG, theta_v=0.1 * DEG,
                        fov_h=5 * DEG, fov_v=5 * DEG)
    aimed_away = Pose(rotation=so3_exp(np.array([0.0, 0.0, np.pi / 2])),
                      translation=np.zeros(3))
    assert synthetic_observations(scene, [aimed_away], pattern=narrow)[0] == []


def test_synthetic_observations_noise_determinism():
    placement = MarkerPlacement(tag_id=5, plane=0, center=(0.0, 0.0), side=0.692)
    scene = single_plane_scene(distance=4.0, markers=[placement])
    a = synthetic_observations(scene, [Pose.identity()], sigma_corner=0.01, seed=4)
    b = synthetic_observations(scene, [Pose.identity()], sigma_corner=0.01, seed=4)
    c = synthetic_observations(scene, [Pose.identity()], sigma_corner=0.01, seed=5)
    assert np.array_equal(a[0][0].corners_3d, b[0][0].corners_3d)
    assert not np.array_equal(a[0][0].corners_3d, c[0][0].corners_3d)
    assert a[0][0].e_pp > 0


def test_scene_validation():
    plane = PlaneSpec(pose=Pose.identity(), width=1.0, height=1.0)
    with pytest.raises(ValueError):
        Scene(planes=(plane,), markers=(
            MarkerPlacement(tag_id=1, plane=0, center=(0.4, 0.0), side=0.5),))
    with pytest.raises(ValueError):
        Scene(planes=(plane,), markers=(
            MarkerPlacement(tag_id=1, plane=0, center=(0.0, 0.0), side=0.3),
            MarkerPlacement(tag_id=1, plane=0, center=(0.0, 0.4), side=0.1),))
    with pytest.raises(ValueError):
        MarkerPlacement(tag_id=-1, plane=0, center=(0.0, 0.0), side=0.3)


def test_scene_file_round_trip(tmp_path):
    decoy = MarkerPlacement(tag_id=-1, plane=0, center=(0.5, 0.5), side=0.4,
                            cell_grid=np.zeros((6, 6), dtype=np.uint8))
    marker = MarkerPlacement(tag_id=9, plane=0, center=(-0.5, -0.3), side=0.692,
                             rotation=0.25)
    scene = Scene(planes=(
        PlaneSpec(pose=plane_facing([4.0, 1.0, 0.5], [0.0, 0.0, 0.0]),
                  width=3.0, height=3.0, intensity=120.0),),
        markers=(marker, decoy))
    viewpoints = [Pose.identity(),
                  Pose(rotation=so3_exp(np.array([0.1, -0.2, 0.3])),
                       translation=np.array([1.0, 2.0, 3.0]))]
    model = SensorModel(pattern=SolidState(fov=50 * DEG, samples=12345),
                        sigma_r=0.01, sigma_i=1.5, seed=77)
    path = tmp_path / "scene.json"
    write_scene_file(path, scene, viewpoints, model)
    scene2, viewpoints2, model2 = read_scene_file(path)

    assert len(scene2.planes) == 1 and len(scene2.markers) == 2
    assert np.array_equal(scene2.planes[0].pose.matrix(), scene.planes[0].pose.matrix())
    assert scene2.markers[0].tag_id == 9 and scene2.markers[1].tag_id == -1
    assert np.array_equal(scene2.markers[1].cell_grid, decoy.cell_grid)
    assert len(viewpoints2) == 2
    assert np.array_equal(viewpoints2[1].matrix(), viewpoints[1].matrix())
    assert isinstance(model2.pattern, SolidState)
    assert model2.pattern.samples == 12345 and model2.seed == 77

    # Round trip through dicts is stable.
    d1 = scene_to_dict(scene, viewpoints, model)
    d2 = scene_to_dict(scene2, viewpoints2, model2)
    assert d1 == d2
