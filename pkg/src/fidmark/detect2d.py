"""Square-tag detection on binary images.

The tag's black border plus whatever black code cells touch it form one
connected dark region whose outer boundary is the tag outline. Detection
walks that boundary, fits a quad, refines corners by intersecting
least-squares border lines, then samples the code grid through a
perspective homography and matches the dictionary.

Corner order in a Detection2D follows the tag's own corner convention:
index 0 is the cell-grid origin corner of the decoded orientation and the
order is counter-clockwise on the physical tag face. In image coordinates
(column u, row v with v increasing upward) that traversal appears clockwise,
because azimuth grows to the viewer's left.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .family import TagFamily, grid_to_code, _hamming
from .image import BinaryImage

# Sub-cell sample offsets (fractions of one cell) for bit voting.
SAMPLE_OFFSETS = (0.3, 0.5, 0.7)
# Contour fraction trimmed from each end of an edge before line fitting.
EDGE_TRIM = 0.15


@dataclass(frozen=True)
class Detection2D:
    tag_id: int
    corners_px: np.ndarray   # (4, 2) float64, (u, v)
    errors: int              # bit errors against the matched code
    margin: int              # error gap to the second-best dictionary entry


def _shoelace(corners: np.ndarray) -> float:
    u, v = corners[:, 0], corners[:, 1]
    return 0.5 * float(np.sum(u * np.roll(v, -1) - np.roll(u, -1) * v))


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 perspective map with h33 = 1 from four point correspondences."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -x * u, -y * u]
        b[2 * i] = u
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -x * v, -y * v]
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homo = np.hstack([pts, np.ones((len(pts), 1))]) @ h.T
    return homo[:, :2] / homo[:, 2:3]


def _approx_quad(contour: np.ndarray):
    perimeter = cv2.arcLength(contour, closed=True)
    for frac in (0.02, 0.04, 0.06, 0.08, 0.10, 0.12):
        approx = cv2.approxPolyDP(contour, frac * perimeter, closed=True)
        if len(approx) == 4 and cv2.isContourConvex(approx):
            return approx.reshape(4, 2).astype(np.float64)
    return None


def _fit_line(points: np.ndarray):
    """Total-least-squares line: (point on line, unit direction)."""
    mean = points.mean(axis=0)
    centered = points - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return mean, vt[0]


def _intersect(p1, d1, p2, d2):
    a = np.column_stack([d1, -d2])
    if abs(np.linalg.det(a)) < 1e-12:
        return None
    t = np.linalg.solve(a, p2 - p1)
    return p1 + t[0] * d1


def _refine_corners(contour: np.ndarray, quad: np.ndarray) -> np.ndarray:
    """Subpixel corners from intersections of fitted border lines.

    Contour points trace the centers of the outermost dark pixels, half a
    pixel inside the true edge, so each fitted line is pushed 0.5 px along
    its outward normal before intersecting.
    """
    pts = contour.reshape(-1, 2).astype(np.float64)
    n = len(pts)
    corner_idx = [int(np.argmin(np.sum((pts - q) ** 2, axis=1))) for q in quad]
    centroid = quad.mean(axis=0)

    lines = []
    for e in range(4):
        i0, i1 = corner_idx[e], corner_idx[(e + 1) % 4]
        if i1 >= i0:
            segment = pts[i0:i1 + 1]
        else:
            segment = np.vstack([pts[i0:], pts[:i1 + 1]])
        trim = max(1, int(len(segment) * EDGE_TRIM))
        if len(segment) - 2 * trim >= 4:
            segment = segment[trim:-trim]
        if len(segment) < 2:
            point, direction = _fit_line(np.vstack([quad[e], quad[(e + 1) % 4]]))
        else:
            point, direction = _fit_line(segment)
        normal = np.array([-direction[1], direction[0]])
        if normal @ (point - centroid) < 0:
            normal = -normal
        lines.append((point + 0.5 * normal, direction))

    refined = []
    for e in range(4):
        p1, d1 = lines[(e - 1) % 4]
        p2, d2 = lines[e]
        crossing = _intersect(p1, d1, p2, d2)
        refined.append(quad[e] if crossing is None else crossing)
    return np.array(refined)


def _order_clockwise_v_up(corners: np.ndarray) -> np.ndarray:
    """Front-face tag corner order: clockwise when v points up."""
    if _shoelace(corners) > 0:
        corners = corners[::-1]
    return corners


def _cell_samples(cells: int):
    """Sample coordinates (xi, eta) for every cell of the full tag grid."""
    offs = np.array(SAMPLE_OFFSETS)
    centers = []
    for i in range(cells):
        for j in range(cells):
            gx, gy = np.meshgrid(j + offs, i + offs)
            centers.append(np.column_stack([gx.ravel(), gy.ravel()]))
    return np.array(centers)  # (cells^2, 9, 2)


def _sample_tag(bits: np.ndarray, corners: np.ndarray, cells: int) -> np.ndarray:
    """Mean bit value per cell, sampled through the corner homography.

    Corner k maps to tag grid corner k of the chain
    (0, C) -> (C, C) -> (C, 0) -> (0, 0); that is the marker's own
    counter-clockwise corner order expressed in (column, row-from-top) grid
    coordinates.
    """
    src = np.array([[0.0, cells], [cells, cells], [cells, 0.0], [0.0, 0.0]])
    h = homography(src, corners)
    samples = _cell_samples(cells)
    flat = samples.reshape(-1, 2)
    px = apply_homography(h, flat)
    u = np.rint(px[:, 0]).astype(np.int64)
    v = np.rint(px[:, 1]).astype(np.int64)
    height, width = bits.shape
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    values = np.zeros(len(flat))
    values[inside] = bits[v[inside], u[inside]]
    return values.reshape(cells * cells, -1).mean(axis=1).reshape(cells, cells)


def detect_2d(img: BinaryImage, family: TagFamily, *, min_side: int = 5,
              min_area: int = 20, border_black_min: float = 0.8,
              max_errors: int = 1) -> list[Detection2D]:
    """All decodable tags in a binary image.

    Returns an empty list when nothing decodes; never raises on content.
    """
    bits = img.bits
    height, width = bits.shape
    dark = (bits == 0).astype(np.uint8)
    count, labels, stats, _ = cv2.connectedComponentsWithStats(dark, connectivity=8)

    cells = family.cells
    g, border = family.grid, family.border
    interior = slice(border, border + g)
    detections = []

    for comp in range(1, count):
        x, y, w, h, area = stats[comp]
        if area < min_area or w < min_side or h < min_side:
            continue
        if x == 0 or y == 0 or x + w == width or y + h == height:
            continue  # clipped by the image edge

        comp_mask = (labels[y:y + h, x:x + w] == comp).astype(np.uint8)
        contours, _ = cv2.findContours(comp_mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        if not contours:
            continue
        contour = max(contours, key=cv2.contourArea)
        if cv2.contourArea(contour) < min_area:
            continue
        quad = _approx_quad(contour)
        if quad is None:
            continue
        corners = _refine_corners(contour, quad) + np.array([x, y], dtype=np.float64)
        if abs(_shoelace(corners)) < min_area / 2:
            continue
        corners = _order_clockwise_v_up(corners)

        grid_means = _sample_tag(bits, corners, cells)
        ring_values = grid_means[_ring_mask(cells, border, g)]
        if 1.0 - ring_values.mean() < border_black_min:
            continue

        # The decoded orientation is the cyclic shift whose sampled grid
        # matches a dictionary code directly; rotated shifts sit >= 3 bits
        # away by the family's self-rotation guarantee, so at most one fits.
        for shift in range(4):
            candidate = np.roll(corners, -shift, axis=0)
            means = grid_means if shift == 0 else _sample_tag(bits, candidate, cells)
            code_grid = (means[interior, interior] > 0.5).astype(np.uint8)
            hit = _match_exact(family, code_grid, max_errors)
            if hit is not None:
                tag_id, errors, margin = hit
                detections.append(Detection2D(tag_id=tag_id, corners_px=candidate,
                                              errors=errors, margin=margin))
                break
    return detections


def _ring_mask(cells: int, border: int, g: int) -> np.ndarray:
    mask = np.ones((cells, cells), dtype=bool)
    mask[border:border + g, border:border + g] = False
    return mask


def _match_exact(family: TagFamily, grid: np.ndarray, max_errors: int):
    """Dictionary match without rotation search."""
    code = grid_to_code(grid)
    best_err, best_id = max_errors + 1, -1
    second = family.grid * family.grid + 1
    for tag_id, ref in enumerate(family.codes):
        err = _hamming(code, ref)
        if err < best_err:
            if best_id >= 0:
                second = best_err
            best_err, best_id = err, tag_id
        elif err < second:
            second = err
    if best_id < 0:
        return None
    return best_id, best_err, second - best_err
