import numpy as np
import pytest
from numpy.testing import assert_allclose

from fidmark.cloud import PointCloud
from fidmark.errors import EmptyCloud, OutOfBounds
from fidmark.image import (
    BinaryImage,
    IntensityImage,
    ProjectionConfig,
    binarize,
    dump_images,
    flip_horizontal,
    gaussian_blur,
    project,
    unproject,
    write_pgm,
)

DEG = np.pi / 180.0


def centered_cfg(width=41, height=41, theta=1.0 * DEG):
    return ProjectionConfig(theta_a=theta, theta_i=theta,
                            u_offset=width // 2, v_offset=height // 2,
                            width=width, height=height)


class TestProject:
    def test_single_point_on_axis(self):
        cfg = centered_cfg()
        img = project(PointCloud(np.array([[1.0, 0, 0]]), np.array([100.0])), cfg)
        assert img.observed[cfg.v_offset, cfg.u_offset]
        assert img.intensity[cfg.v_offset, cfg.u_offset] == 100.0
        assert_allclose(img.range[cfg.v_offset, cfg.u_offset], 1.0)
        assert img.observed.sum() == 1

    def test_azimuth_45_degrees(self):
        cfg = centered_cfg(width=121, height=41)
        img = project(PointCloud(np.array([[1.0, 1.0, 0]]), np.array([50.0])), cfg)
        u_expected = int(np.rint((45 * DEG) / cfg.theta_a)) + cfg.u_offset
        assert img.observed[cfg.v_offset, u_expected]

    def test_collision_keeps_nearest(self):
        cfg = centered_cfg()
        cloud = PointCloud(np.array([[5.0, 0, 0], [2.0, 0, 0]]), np.array([10.0, 20.0]))
        img = project(cloud, cfg)
        assert img.range[cfg.v_offset, cfg.u_offset] == 2.0
        assert img.intensity[cfg.v_offset, cfg.u_offset] == 20.0

    def test_equal_range_tie_keeps_first(self):
        cfg = centered_cfg()
        cloud = PointCloud(np.array([[3.0, 0, 0], [3.0, 0, 0]]), np.array([10.0, 20.0]))
        img = project(cloud, cfg)
        assert img.intensity[cfg.v_offset, cfg.u_offset] == 10.0

    def test_out_of_bounds_points_dropped(self):
        cfg = centered_cfg(width=5, height=5)
        cloud = PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.array([1.0, 2.0]))
        img = project(cloud, cfg)
        assert img.observed.sum() == 1

    def test_empty_cloud_raises(self):
        with pytest.raises(EmptyCloud):
            project(PointCloud.empty(), centered_cfg())

    def test_observed_pixels_bounded_by_point_count(self, rng):
        cloud = PointCloud(rng.normal(size=(200, 3)) + np.array([5.0, 0, 0]),
                           rng.uniform(0, 255, 200))
        img = project(cloud, centered_cfg(width=201, height=201))
        assert 0 < img.observed.sum() <= 200

    def test_auto_config_covers_all_points(self, rng):
        cloud = PointCloud(rng.normal(size=(300, 3)) + np.array([8.0, 0, 0]),
                           rng.uniform(0, 255, 300))
        cfg = ProjectionConfig.for_cloud(cloud, 0.5 * DEG, 0.5 * DEG)
        img = project(cloud, cfg)
        # nothing dropped: every point lands in bounds (pixels may collide)
        assert img.range[img.observed].size >= 1
        assert img.observed.sum() <= 300
        # the extreme angles are inside the grid by construction
        theta = np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0])
        ku = np.rint(theta / cfg.theta_a).astype(int) + cfg.u_offset
        assert ku.min() >= 0 and ku.max() < cfg.width


class TestUnproject:
    def test_round_trip_quantization_bound(self, rng):
        cfg = centered_cfg()
        for _ in range(50):
            direction = rng.normal(size=3)
            direction[0] = abs(direction[0]) + 1.0
            direction /= np.linalg.norm(direction)
            point = direction * rng.uniform(1.0, 10.0)
            # keep inside the 20 deg half-extent of the image
            if abs(np.arctan2(point[1], point[0])) > 18 * DEG:
                continue
            if abs(np.arctan2(point[2], np.hypot(point[0], point[1]))) > 18 * DEG:
                continue
            img = project(PointCloud(point[None, :], np.array([9.0])), cfg)
            vs, us = np.nonzero(img.observed)
            recovered = unproject(img, us[0], vs[0])
            r = np.linalg.norm(point)
            assert np.linalg.norm(recovered - point) <= r * max(cfg.theta_a, cfg.theta_i)

    def test_center_pixel_is_on_axis(self):
        cfg = centered_cfg()
        img = project(PointCloud(np.array([[3.0, 0, 0]]), np.array([1.0])), cfg)
        assert_allclose(unproject(img, cfg.u_offset, cfg.v_offset), [3.0, 0, 0], atol=1e-12)

    def test_unobserved_returns_none(self):
        cfg = centered_cfg()
        img = project(PointCloud(np.array([[3.0, 0, 0]]), np.array([1.0])), cfg)
        assert unproject(img, 0, 0) is None

    def test_out_of_bounds_raises(self):
        cfg = centered_cfg()
        img = project(PointCloud(np.array([[3.0, 0, 0]]), np.array([1.0])), cfg)
        with pytest.raises(OutOfBounds):
            unproject(img, -1, 0)
        with pytest.raises(OutOfBounds):
            unproject(img, cfg.width, 0)


def image_from_grid(grid, observed=None):
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    cfg = ProjectionConfig(theta_a=1 * DEG, theta_i=1 * DEG,
                           u_offset=w // 2, v_offset=h // 2, width=w, height=h)
    if observed is None:
        observed = np.ones_like(grid, dtype=bool)
    rng_grid = np.where(observed, 5.0, 0.0)
    return IntensityImage(grid, rng_grid, observed, cfg)


class TestBinarize:
    def test_all_below_threshold(self):
        img = image_from_grid(np.full((4, 4), 10.0))
        assert binarize(img, 50).bits.sum() == 0

    def test_checkerboard(self):
        grid = np.zeros((8, 8))
        grid[::2, ::2] = 200.0
        grid[1::2, 1::2] = 200.0
        grid[grid == 0] = 20.0
        bits = binarize(image_from_grid(grid), 70).bits
        assert np.array_equal(bits.astype(bool), grid == 200.0)

    def test_unobserved_is_black(self):
        grid = np.full((4, 4), 255.0)
        observed = np.ones((4, 4), dtype=bool)
        observed[1, 2] = False
        bits = binarize(image_from_grid(grid, observed), 10).bits
        assert bits[1, 2] == 0
        assert bits.sum() == 15

    def test_monotone_in_threshold(self, rng):
        img = image_from_grid(rng.uniform(0, 255, size=(12, 12)))
        previous = binarize(img, 0).bits
        for lam in range(10, 260, 10):
            current = binarize(img, lam).bits
            assert not np.any(current > previous)
            previous = current


class TestBlur:
    def test_constant_unchanged(self):
        img = image_from_grid(np.full((9, 9), 42.0))
        out = gaussian_blur(img, sigma=1.5)
        assert_allclose(out.intensity, 42.0, atol=1e-9)

    def test_single_pixel_mass_preserved(self):
        grid = np.zeros((21, 21))
        grid[10, 10] = 100.0
        out = gaussian_blur(image_from_grid(grid), sigma=1.0)
        assert abs(out.intensity.sum() - 100.0) < 1e-6

    def test_blur_threshold_bounds_square(self):
        bits = np.zeros((30, 30), dtype=np.uint8)
        bits[8:22, 8:22] = 1
        cfg = centered_cfg(width=30, height=30)
        sigma = 1.0
        out = gaussian_blur(BinaryImage(bits, cfg), sigma)
        halfwidth = int(np.ceil(3 * sigma))
        grown = np.zeros_like(bits)
        grown[8 - halfwidth:22 + halfwidth, 8 - halfwidth:22 + halfwidth] = 1
        shrunk = np.zeros_like(bits)
        shrunk[8 + halfwidth:22 - halfwidth, 8 + halfwidth:22 - halfwidth] = 1
        assert np.all(out.bits <= grown)
        assert np.all(out.bits >= shrunk)


class TestFlip:
    def test_symmetric_image_unchanged(self):
        grid = np.zeros((5, 6))
        grid[:, [0, 5]] = 7.0
        img = image_from_grid(grid)
        assert_allclose(flip_horizontal(img).intensity, grid)

    def test_single_pixel_moves(self):
        grid = np.zeros((6, 10))
        grid[5, 2] = 1.0
        out = flip_horizontal(image_from_grid(grid))
        assert out.intensity[5, 7] == 1.0
        assert out.intensity.sum() == 1.0

    def test_double_flip_is_identity(self, rng):
        img = image_from_grid(rng.uniform(0, 255, size=(7, 11)))
        out = flip_horizontal(flip_horizontal(img))
        assert np.array_equal(out.intensity, img.intensity)
        bin_img = binarize(img, 128)
        assert np.array_equal(flip_horizontal(flip_horizontal(bin_img)).bits, bin_img.bits)


def test_pgm_and_dump(tmp_path, rng):
    img = image_from_grid(rng.uniform(0, 255, size=(6, 8)))
    files = dump_images(img, binarize(img, 128), tmp_path, "scan0")
    assert len(files) == 3
    pgm = (tmp_path / "scan0_intensity.pgm").read_text().splitlines()
    assert pgm[0] == "P2"
    assert pgm[1] == "8 6"
    assert pgm[2] == "255"
    values = np.array([[int(x) for x in row.split()] for row in pgm[3:]])
    assert values.shape == (6, 8)
    assert values.min() >= 0 and values.max() <= 255
    rng_rows = (tmp_path / "scan0_range.txt").read_text().splitlines()
    assert len(rng_rows) == 6
