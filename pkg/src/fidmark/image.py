"""Spherical-projection intensity images.

A point cloud maps to a pixel grid indexed by azimuth (column u) and
inclination (row v); each observed pixel stores the intensity and range of
the nearest point that landed on it. Row v grows with inclination, so v is
"up" in the world; PGM export flips rows so the files display upright.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d

from .cloud import PointCloud
from .errors import EmptyCloud, OutOfBounds

# Pixels per half-kernel per sigma; kernel halfwidth = ceil(3 sigma).
KERNEL_SIGMAS = 3.0


@dataclass(frozen=True)
class ProjectionConfig:
    """Angular resolutions (rad/px), pixel offsets, and image size."""

    theta_a: float
    theta_i: float
    u_offset: int
    v_offset: int
    width: int
    height: int

    def __post_init__(self):
        if not (self.theta_a > 0 and self.theta_i > 0):
            raise ValueError("angular resolutions must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    @classmethod
    def for_cloud(cls, cloud: PointCloud, theta_a: float, theta_i: float) -> "ProjectionConfig":
        """Auto-size to the cloud's angular extent, image centered on it."""
        if len(cloud) == 0:
            raise EmptyCloud("cannot auto-size projection for an empty cloud")
        x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
        theta = np.arctan2(y, x)
        phi = np.arctan2(z, np.hypot(x, y))
        ku = np.rint(theta / theta_a).astype(np.int64)
        kv = np.rint(phi / theta_i).astype(np.int64)
        return cls(
            theta_a=theta_a,
            theta_i=theta_i,
            u_offset=int(-ku.min()),
            v_offset=int(-kv.min()),
            width=int(ku.max() - ku.min()) + 1,
            height=int(kv.max() - kv.min()) + 1,
        )

    @classmethod
    def for_fov(cls, theta_a: float, theta_i: float, fov_h: float, fov_v: float) -> "ProjectionConfig":
        """Fixed-size config for a sensor field of view centered on the x axis."""
        width = int(np.rint(fov_h / theta_a)) + 1
        height = int(np.rint(fov_v / theta_i)) + 1
        return cls(theta_a=theta_a, theta_i=theta_i,
                   u_offset=width // 2, v_offset=height // 2,
                   width=width, height=height)


@dataclass(frozen=True)
class IntensityImage:
    intensity: np.ndarray   # (height, width)
    range: np.ndarray       # (height, width), 0 where unobserved
    observed: np.ndarray    # (height, width) bool
    config: ProjectionConfig

    def __post_init__(self):
        shape = (self.config.height, self.config.width)
        for grid in (self.intensity, self.range, self.observed):
            if grid.shape != shape:
                raise ValueError("grid dimensions disagree with config")


@dataclass(frozen=True)
class BinaryImage:
    bits: np.ndarray        # (height, width) uint8, values 0/1
    config: ProjectionConfig


def project(cloud: PointCloud, cfg: ProjectionConfig) -> IntensityImage:
    """Spherical projection with nearest-range collision resolution.

    Points map to pixels u = round(theta/theta_a) + u_offset and
    v = round(phi/theta_i) + v_offset; points falling outside the image are
    dropped. When several points share a pixel the one with the smallest
    range wins (foreground occludes background); among equal ranges the
    earliest point in the cloud wins, keeping projection deterministic.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot project an empty cloud")
    xyz = cloud.xyz
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    phi = np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))
    rng = np.linalg.norm(xyz, axis=1)

    u = np.rint(theta / cfg.theta_a).astype(np.int64) + cfg.u_offset
    v = np.rint(phi / cfg.theta_i).astype(np.int64) + cfg.v_offset
    keep = (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height) & (rng > 0)

    u, v, rng = u[keep], v[keep], rng[keep]
    inten = cloud.intensity[keep]
    idx = np.flatnonzero(keep)

    # Assign in order of decreasing range (ties: decreasing index) so the
    # final write at each pixel is the nearest point, first-come on ties.
    order = np.lexsort((-idx, -rng))
    u, v, rng, inten = u[order], v[order], rng[order], inten[order]

    intensity = np.zeros((cfg.height, cfg.width))
    range_grid = np.zeros((cfg.height, cfg.width))
    observed = np.zeros((cfg.height, cfg.width), dtype=bool)
    intensity[v, u] = inten
    range_grid[v, u] = rng
    observed[v, u] = True
    return IntensityImage(intensity, range_grid, observed, cfg)


def unproject(img: IntensityImage, u: float, v: float):
    """Cartesian point for an image coordinate, or None when unobserved.

    The range comes from the nearest pixel; the angles come from the given
    (possibly fractional) coordinate, so subpixel corner positions keep
    their angular precision. Raises OutOfBounds outside the image.
    """
    cfg = img.config
    ui, vi = int(np.rint(u)), int(np.rint(v))
    if not (0 <= ui < cfg.width and 0 <= vi < cfg.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {cfg.width}x{cfg.height} image")
    if not img.observed[vi, ui]:
        return None
    r = img.range[vi, ui]
    theta = cfg.theta_a * (u - cfg.u_offset)
    phi = cfg.theta_i * (v - cfg.v_offset)
    return np.array([
        r * np.cos(phi) * np.cos(theta),
        r * np.cos(phi) * np.sin(theta),
        r * np.sin(phi),
    ])


def binarize(img: IntensityImage, lam: float) -> BinaryImage:
    """Observed pixels brighter than lam become 1; everything else 0."""
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    bits = (img.observed & (img.intensity > lam)).astype(np.uint8)
    return BinaryImage(bits, img.config)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(KERNEL_SIGMAS * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_grid(grid: np.ndarray, sigma: float) -> np.ndarray:
    kernel = _gaussian_kernel(sigma)
    out = convolve1d(grid.astype(np.float64), kernel, axis=0, mode="nearest")
    return convolve1d(out, kernel, axis=1, mode="nearest")


def gaussian_blur(img, sigma: float):
    """Separable Gaussian blur, halfwidth ceil(3 sigma), edges clamped.

    An IntensityImage blurs its intensity grid (range and mask untouched).
    A BinaryImage blurs its bits and re-thresholds at 0.5, staying binary.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if isinstance(img, IntensityImage):
        return replace(img, intensity=_blur_grid(img.intensity, sigma))
    if isinstance(img, BinaryImage):
        smooth = _blur_grid(img.bits, sigma)
        return BinaryImage((smooth > 0.5).astype(np.uint8), img.config)
    raise TypeError(f"unsupported image type {type(img)!r}")


def flip_horizontal(img):
    """Reverse column order; applying twice is the identity."""
    if isinstance(img, IntensityImage):
        return IntensityImage(
            np.flip(img.intensity, axis=1).copy(),
            np.flip(img.range, axis=1).copy(),
            np.flip(img.observed, axis=1).copy(),
            img.config,
        )
    if isinstance(img, BinaryImage):
        return BinaryImage(np.flip(img.bits, axis=1).copy(), img.config)
    raise TypeError(f"unsupported image type {type(img)!r}")


def unflip_u(u: float, cfg: ProjectionConfig) -> float:
    """Column coordinate in the original image for one in the flipped image."""
    return (cfg.width - 1) - u


# ---------------------------------------------------------------------------
# Export


def write_pgm(path, grid: np.ndarray) -> None:
    """P2 PGM, values clipped to 0..255; rows flipped so up displays up."""
    values = np.clip(np.rint(grid), 0, 255).astype(np.int64)[::-1]
    lines = [f"P2", f"{values.shape[1]} {values.shape[0]}", "255"]
    lines += [" ".join(str(x) for x in row) for row in values]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def write_range_grid(path, img: IntensityImage) -> None:
    """Whitespace float grid of ranges, 0 where unobserved; display order."""
    rows = img.range[::-1]
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(f"{x:.9g}" for x in row))
            fh.write("\n")


def dump_images(img: IntensityImage, binary: BinaryImage | None, out_dir, stem: str) -> list:
    """Write intensity PGM, range grid, and (when given) binary PGM."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / f"{stem}_intensity.pgm"
    write_pgm(p, img.intensity)
    written.append(p)
    p = out / f"{stem}_range.txt"
    write_range_grid(p, img)
    written.append(p)
    if binary is not None:
        p = out / f"{stem}_binary.pgm"
        write_pgm(p, binary.bits * 255)
        written.append(p)
    return written
