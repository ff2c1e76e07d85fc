"""From binary mask to tilt-corrected diameters in millimetres.

Per axial slice: keep the largest 4-connected component, trace its 0.5-level
boundary with marching squares, fit an ellipse to the boundary points by
direct least squares, and take the long axis (2a) as the raw diameter. The
local vessel tilt is estimated from the drift of the ellipse centers across
slices and the corrected diameter is raw * cos(tilt). The study diameter is
the maximum corrected value over slices.

Coordinates are physical: a voxel at index (i, j) in a slice sits at
(i*sx, j*sy) mm, and slice z sits at z*sz mm.
"""

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .volumes import MaskVolume

MAX_TILT_RAD = math.radians(60.0)   # clamp for pathological centroid drift


@dataclass(frozen=True)
class EllipseParams:
    """Fitted conic in slice-plane mm coordinates."""
    cx: float
    cy: float
    semi_major: float
    semi_minor: float
    phi: float          # orientation of the major axis, radians in [0, pi)

    def long_axis(self):
        return 2.0 * self.semi_major


@dataclass(frozen=True)
class SliceMeasurement:
    z: int
    raw_diameter_mm: float
    tilt_rad: float
    corrected_diameter_mm: float
    center_mm: tuple
    contour_points: int


@dataclass(frozen=True)
class StudyMeasurement:
    slices: list
    max_corrected_diameter_mm: Optional[float]

    @property
    def found_aorta(self):
        return self.max_corrected_diameter_mm is not None


# ---------------------------------------------------------------------------
# Connected components and contour tracing
# ---------------------------------------------------------------------------

def _largest_component(slice2d):
    """Boolean mask of the largest 4-connected foreground component.

    Ties break toward the component found first in scan order, so the result
    is deterministic. Returns None for an empty slice.
    """
    fg = slice2d != 0
    if not fg.any():
        return None
    xe, ye = fg.shape
    labels = np.zeros((xe, ye), np.int32)
    best_label, best_size = 0, 0
    next_label = 0
    for i, j in zip(*np.nonzero(fg)):
        if labels[i, j]:
            continue
        next_label += 1
        size = 0
        queue = deque([(i, j)])
        labels[i, j] = next_label
        while queue:
            a, b = queue.popleft()
            size += 1
            if a > 0 and fg[a - 1, b] and not labels[a - 1, b]:
                labels[a - 1, b] = next_label
                queue.append((a - 1, b))
            if a + 1 < xe and fg[a + 1, b] and not labels[a + 1, b]:
                labels[a + 1, b] = next_label
                queue.append((a + 1, b))
            if b > 0 and fg[a, b - 1] and not labels[a, b - 1]:
                labels[a, b - 1] = next_label
                queue.append((a, b - 1))
            if b + 1 < ye and fg[a, b + 1] and not labels[a, b + 1]:
                labels[a, b + 1] = next_label
                queue.append((a, b + 1))
        if size > best_size:
            best_size, best_label = size, next_label
    return labels == best_label


# Directed marching-squares segments per cell case, keeping foreground on the
# left of the travel direction. Corners: bit0=(i,j), bit1=(i+1,j),
# bit2=(i+1,j+1), bit3=(i,j+1). Edge midpoints in half-index units relative
# to the cell origin: S=(1,0), E=(2,1), N=(1,2), W=(0,1).
_S, _E, _N, _W = (1, 0), (2, 1), (1, 2), (0, 1)
_CASES = {
    1: [(_S, _W)],
    2: [(_E, _S)],
    4: [(_N, _E)],
    8: [(_W, _N)],
    3: [(_E, _W)],
    6: [(_N, _S)],
    12: [(_W, _E)],
    9: [(_S, _N)],
    7: [(_N, _W)],
    14: [(_W, _S)],
    13: [(_S, _E)],
    11: [(_E, _N)],
    # diagonal pairs stay disconnected, consistent with 4-connectivity
    5: [(_S, _W), (_N, _E)],
    10: [(_E, _S), (_W, _N)],
}


def _trace_loops(comp):
    """All closed boundary loops of a boolean image at the 0.5 iso-level.

    Vertices are exact half-integer index positions encoded as integer pairs
    in half-index units; loops are returned as ordered vertex lists.
    """
    padded = np.zeros((comp.shape[0] + 2, comp.shape[1] + 2), bool)
    padded[1:-1, 1:-1] = comp
    a = padded[:-1, :-1].astype(np.int8)
    b = padded[1:, :-1]
    c = padded[1:, 1:]
    d = padded[:-1, 1:]
    case = a + 2 * b + 4 * c + 8 * d
    nxt = {}
    for i, j in zip(*np.nonzero((case > 0) & (case < 15))):
        base = (2 * i, 2 * j)
        for (s, e) in _CASES[int(case[i, j])]:
            nxt[(base[0] + s[0], base[1] + s[1])] = (base[0] + e[0], base[1] + e[1])
    loops = []
    while nxt:
        start, cur = next(iter(nxt.items()))
        loop = [start]
        del nxt[start]
        while cur != start:
            loop.append(cur)
            cur = nxt.pop(cur)
        loops.append(loop)
    return loops


def _shoelace(points):
    x = points[:, 0]
    y = points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def extract_slice_contour(slice2d, spacing):
    """Ordered closed boundary polyline of the largest component, in mm.

    Returns an [n, 2] array of (x, y) mm points (closure implied, first point
    not repeated), or None when the slice is empty or the boundary has fewer
    than 6 points.
    """
    comp = _largest_component(slice2d)
    if comp is None:
        return None
    loops = _trace_loops(comp)
    sx, sy = float(spacing[0]), float(spacing[1])
    best, best_area = None, 0.0
    for loop in loops:
        # half-units in the padded frame -> mm: subtract the 1-pixel pad
        pts = (np.asarray(loop, np.float64) / 2.0 - 1.0) * (sx, sy)
        area = abs(_shoelace(pts))
        if area > best_area:
            best, best_area = pts, area
    if best is None or len(best) < 6:
        return None
    return best


# ---------------------------------------------------------------------------
# Direct least-squares ellipse fit
# ---------------------------------------------------------------------------

def fit_ellipse(points):
    """Direct least-squares conic fit constrained to an ellipse.

    Minimizes the algebraic error subject to 4AC - B^2 = 1 using the
    numerically stable partitioned eigensystem (quadratic and linear conic
    parts are separated; the constrained eigenproblem is solved on the 3x3
    reduced scatter). Input points are centered and isotropically rescaled
    first, which conditions the scatter matrices.
    """
    pts = np.asarray(points, np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be [n, 2], got shape {pts.shape}")
    if len(pts) < 6:
        raise ValueError(f"ellipse fit needs at least 6 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = math.sqrt(float((centered ** 2).sum()) / (2.0 * len(pts)))
    if scale <= 0.0:
        raise ValueError("degenerate point set: all points coincide")
    x = centered[:, 0] / scale
    y = centered[:, 1] / scale

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise ValueError("degenerate point set: collinear or coincident points")
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m)
    a1 = None
    for idx in range(3):
        if not np.isfinite(eigval[idx]) or abs(eigvec[:, idx].imag).max() > 0:
            continue
        v = eigvec[:, idx].real
        if 4.0 * v[0] * v[2] - v[1] ** 2 > 0:
            a1 = v
            break
    if a1 is None:
        raise ValueError("points do not determine an ellipse")
    conic = np.concatenate([a1, t @ a1])   # A, B, C, D, E, F in scaled frame

    # conic -> geometric parameters, still in the scaled frame
    qa, qb, qc, qd, qe, qf = conic
    q = np.array([[qa, qb / 2.0], [qb / 2.0, qc]])
    try:
        center = np.linalg.solve(2.0 * q, [-qd, -qe])
    except np.linalg.LinAlgError:
        raise ValueError("points do not determine an ellipse")
    g = float(center @ q @ center + np.dot([qd, qe], center) + qf)
    lam, vecs = np.linalg.eigh(q)
    axes2 = -g / lam
    if np.any(axes2 <= 0) or not np.all(np.isfinite(axes2)):
        raise ValueError("points do not determine an ellipse")
    order = np.argsort(axes2)[::-1]   # major first
    semi_major, semi_minor = np.sqrt(axes2[order])
    major_vec = vecs[:, order[0]]
    phi = math.atan2(major_vec[1], major_vec[0]) % math.pi

    return EllipseParams(
        cx=float(center[0] * scale + centroid[0]),
        cy=float(center[1] * scale + centroid[1]),
        semi_major=float(semi_major * scale),
        semi_minor=float(semi_minor * scale),
        phi=float(phi),
    )


# ---------------------------------------------------------------------------
# Tilt estimation and correction
# ---------------------------------------------------------------------------

def estimate_tilt(centroids_mm, z_indices, sz_mm):
    """Per-slice vessel tilt from centroid drift across measured slices.

    Uses centered differences over the neighbor slices in the measured list
    (one-sided at the ends); a slice with no measured neighbor gets 0. The
    result is clamped to 60 degrees to bound pathological corrections.
    """
    centroids = np.asarray(centroids_mm, np.float64)
    z = np.asarray(z_indices, np.float64)
    m = len(z)
    if centroids.shape != (m, 2):
        raise ValueError(f"need one (x, y) centroid per slice: {centroids.shape} vs {m}")
    thetas = np.zeros(m)
    for i in range(m):
        lo = i - 1 if i > 0 else i
        hi = i + 1 if i + 1 < m else i
        if lo == hi:
            continue
        dz = (z[hi] - z[lo]) * sz_mm
        drift = float(np.hypot(*(centroids[hi] - centroids[lo])))
        thetas[i] = min(math.atan2(drift, dz), MAX_TILT_RAD)
    return thetas


def corrected_diameter(d_mm, theta):
    """True cross-sectional diameter from an in-plane measurement: d*cos(theta)."""
    if d_mm <= 0:
        raise ValueError(f"diameter must be positive, got {d_mm}")
    if not 0.0 <= theta < math.pi / 2.0:
        raise ValueError(f"tilt must be in [0, pi/2), got {theta}")
    return d_mm * math.cos(theta)


# ---------------------------------------------------------------------------
# Study-level measurement
# ---------------------------------------------------------------------------

def measure_study(mask: MaskVolume) -> StudyMeasurement:
    """Per-slice ellipse fits plus the tilt-corrected study maximum diameter.

    Slices without a fittable contour are skipped; a study where no slice is
    fittable yields max_corrected_diameter_mm = None (no aorta found).
    """
    sx, sy, sz = mask.spacing_mm
    fitted = []
    for z in range(mask.dims[2]):
        contour = extract_slice_contour(mask.data[:, :, z], (sx, sy))
        if contour is None:
            continue
        try:
            ellipse = fit_ellipse(contour)
        except ValueError:
            continue
        fitted.append((z, ellipse, len(contour)))
    if not fitted:
        return StudyMeasurement(slices=[], max_corrected_diameter_mm=None)

    z_list = [z for z, _, _ in fitted]
    centroids = [(e.cx, e.cy) for _, e, _ in fitted]
    thetas = estimate_tilt(centroids, z_list, sz)

    slices = []
    for (z, ellipse, npts), theta in zip(fitted, thetas):
        raw = ellipse.long_axis()
        slices.append(SliceMeasurement(
            z=z,
            raw_diameter_mm=raw,
            tilt_rad=float(theta),
            corrected_diameter_mm=corrected_diameter(raw, theta),
            center_mm=(ellipse.cx, ellipse.cy),
            contour_points=npts,
        ))
    best = max(s.corrected_diameter_mm for s in slices)
    return StudyMeasurement(slices=slices, max_corrected_diameter_mm=best)
