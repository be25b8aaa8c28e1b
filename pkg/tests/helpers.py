"""Shared fixtures: synthetic tag renderings and constructed intensity images.

The renderer reproduces the projection chirality: for a marker facing the
sensor, azimuth (u) grows opposite the marker's local +x and inclination
(v) grows with local +y. Tag cell boundaries are placed on half-integer
pixel coordinates so the ground-truth corners sit exactly between pixels.
"""

import numpy as np

from fidmark.family import TagFamily, default_family
from fidmark.image import BinaryImage, IntensityImage, ProjectionConfig


def full_cell_grid(family: TagFamily, tag_id: int) -> np.ndarray:
    """Complete cells x cells tag pattern: black border ring + code bits."""
    return family.full_grid(tag_id)


def render_tag(tag_id: int, cell_px: int, margin_px: int = 8,
               family: TagFamily | None = None,
               cell_grid: np.ndarray | None = None,
               rotation_deg: float = 0.0):
    """Fronto-parallel tag rendering.

    Returns (BinaryImage, corners_px) where corners_px[k] is the subpixel
    image position of marker corner k (counter-clockwise on the face,
    corner 0 at local (-a/2, -a/2)).
    """
    if family is None:
        family = default_family()
    if cell_grid is None:
        cell_grid = full_cell_grid(family, tag_id)
    cells = family.cells
    size = cells * cell_px + 2 * margin_px
    center = (size - 1) / 2.0

    # Marker-local coordinates (cell units) of every pixel center.
    uu, vv = np.meshgrid(np.arange(size), np.arange(size))
    x = (center - uu) / cell_px
    y = (vv - center) / cell_px
    ang = np.deg2rad(rotation_deg)
    xr = np.cos(ang) * x + np.sin(ang) * y
    yr = -np.sin(ang) * x + np.cos(ang) * y

    half = cells / 2.0
    inside = (np.abs(xr) < half) & (np.abs(yr) < half)
    col = np.clip(np.floor(xr + half), 0, cells - 1).astype(int)
    row = np.clip(np.floor(half - yr), 0, cells - 1).astype(int)

    bits = np.ones((size, size), dtype=np.uint8)
    bits[inside] = cell_grid[row[inside], col[inside]]

    corners_local = np.array([[-half, -half], [half, -half],
                              [half, half], [-half, half]])
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    placed = corners_local @ rot.T
    corners_px = np.column_stack([center - placed[:, 0] * cell_px,
                                  center + placed[:, 1] * cell_px])

    cfg = ProjectionConfig(theta_a=1e-3, theta_i=1e-3, u_offset=0, v_offset=0,
                           width=size, height=size)
    return BinaryImage(bits=bits, config=cfg), corners_px


def bits_to_intensity(bits: np.ndarray, black: float, white: float) -> np.ndarray:
    return np.where(bits > 0, float(white), float(black))


def two_band_image(id_a: int = 3, id_b: int = 12, cell_px: int = 10):
    """Fully observed intensity image where tag A decodes only for
    thresholds in [10, 30] and tag B only in [60, 80].

    Tag A: black 10, white/background 31. Tag B: black 60,
    white/background 81. Returns (IntensityImage, id_a, id_b).
    """
    img_a, _ = render_tag(id_a, cell_px)
    img_b, _ = render_tag(id_b, cell_px)
    band_a = bits_to_intensity(img_a.bits, black=10, white=31)
    band_b = bits_to_intensity(img_b.bits, black=60, white=81)
    gap = np.full((band_a.shape[0], 6), 31.0)
    intensity = np.hstack([band_a, gap, band_b])

    height, width = intensity.shape
    cfg = ProjectionConfig(theta_a=1e-3, theta_i=1e-3, u_offset=0, v_offset=0,
                           width=width, height=height)
    return IntensityImage(intensity=intensity,
                          range=np.full(intensity.shape, 5.0),
                          observed=np.ones(intensity.shape, dtype=bool),
                          config=cfg), id_a, id_b
