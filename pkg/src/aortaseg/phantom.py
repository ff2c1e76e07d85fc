"""Synthetic CT-like studies with closed-form ground truth.

Each phantom is a straight tube (optionally tilted away from the z axis, in
the x-z plane) whose radius follows a Gaussian fusiform profile
    r(z) = r0 + A * exp(-(z - z0)^2 / (2 sigma^2)),
evaluated at the volume-z coordinate of the nearest axis point. Cross
sections perpendicular to the axis are exact circles, so the true maximum
diameter is 2*(r0 + A) no matter the tilt. The truth mask is the analytic
inside predicate at voxel centers; intensities place a bright (contrast) or
faint (non-contrast) lumen on a soft-tissue background plus Gaussian noise,
all inside the network's intensity window.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .volumes import MaskVolume, StudyVolume

LUMEN_CONTRAST = 300.0
LUMEN_NONCONTRAST = 60.0
BACKGROUND = 40.0


@dataclass(frozen=True)
class Aneurysm:
    z0_mm: float          # bulge center along the volume z coordinate
    amplitude_mm: float   # added radius at the peak
    width_mm: float       # Gaussian sigma

    def to_dict(self):
        return {"z0_mm": self.z0_mm, "amplitude_mm": self.amplitude_mm,
                "width_mm": self.width_mm}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 32)
    spacing_mm: tuple = (1.5, 1.5, 4.0)
    base_radius_mm: float = 10.0
    aneurysm: Optional[Aneurysm] = None
    tilt_deg: float = 0.0
    contrast_mode: str = "contrast"      # "contrast" | "noncontrast"
    noise_sigma: float = 5.0
    patient_id: str = "p000"
    study_id: str = "s000"

    def __post_init__(self):
        if self.contrast_mode not in ("contrast", "noncontrast"):
            raise ValueError(f"unknown contrast mode {self.contrast_mode!r}")
        if self.base_radius_mm <= 0:
            raise ValueError("base radius must be positive")
        if self.aneurysm is not None and self.aneurysm.width_mm <= 0:
            raise ValueError("aneurysm width must be positive")
        if not 0.0 <= self.tilt_deg < 60.0:
            raise ValueError(f"tilt must be in [0, 60) degrees, got {self.tilt_deg}")

    def radius_at(self, z_mm):
        r = self.base_radius_mm
        if self.aneurysm is not None:
            a = self.aneurysm
            r = r + a.amplitude_mm * np.exp(-((z_mm - a.z0_mm) ** 2)
                                            / (2.0 * a.width_mm ** 2))
        return r

    def max_radius_mm(self):
        if self.aneurysm is None:
            return self.base_radius_mm
        return self.base_radius_mm + self.aneurysm.amplitude_mm


@dataclass
class PhantomStudy:
    spec: PhantomSpec
    volume: StudyVolume
    truth_mask: MaskVolume
    analytic_max_diameter_mm: float
    reference_aaa: bool


def analytic_max_diameter(spec):
    """2 * max_z r(z); perpendicular to the axis, hence tilt-invariant."""
    return 2.0 * spec.max_radius_mm()


def _axis(spec):
    """Center point and unit direction of the tube axis (x-z plane tilt)."""
    xe, ye, ze = spec.dims
    sx, sy, sz = spec.spacing_mm
    center = np.array([(xe - 1) * sx / 2.0, (ye - 1) * sy / 2.0, (ze - 1) * sz / 2.0])
    t = math.radians(spec.tilt_deg)
    direction = np.array([math.sin(t), 0.0, math.cos(t)])
    return center, direction


def _containment_margin(spec):
    """Smallest lateral gap (mm) between the tube and the x/y faces over all
    slices; negative when the tube exits the volume."""
    xe, ye, ze = spec.dims
    sx, sy, sz = spec.spacing_mm
    center, _ = _axis(spec)
    t = math.radians(spec.tilt_deg)
    zs = np.linspace(0.0, (ze - 1) * sz, 4 * ze + 1)
    r = np.asarray(spec.radius_at(zs), np.float64)
    half_x = r / math.cos(t)
    ax = center[0] + math.tan(t) * (zs - center[2])
    gap_x = np.minimum(ax - half_x, (xe - 1) * sx - ax - half_x)
    gap_y = min(center[1] - r.max(), (ye - 1) * sy - center[1] - r.max())
    return float(min(gap_x.min(), gap_y))


def max_feasible_tilt_deg(spec, margin_mm=2.0, hi=30.0):
    """Largest tilt (degrees) keeping the tube at least margin_mm inside."""
    lo, hi = 0.0, hi
    if _containment_margin(_replace_tilt(spec, 0.0)) < margin_mm:
        return 0.0
    for _ in range(40):
        mid = (lo + hi) / 2.0
        if _containment_margin(_replace_tilt(spec, mid)) >= margin_mm:
            lo = mid
        else:
            hi = mid
    return lo


def _replace_tilt(spec, tilt_deg):
    from dataclasses import replace
    return replace(spec, tilt_deg=tilt_deg)


def generate(spec, seed):
    """Voxelize the spec into (volume, truth mask); deterministic per seed."""
    if _containment_margin(spec) < 0.0:
        raise ValueError(
            f"tube exits the volume for spec {spec.study_id!r} "
            f"(tilt {spec.tilt_deg} deg, max radius {spec.max_radius_mm()} mm)")
    xe, ye, ze = spec.dims
    sx, sy, sz = spec.spacing_mm
    center, u = _axis(spec)

    ix, iy, iz = np.meshgrid(np.arange(xe), np.arange(ye), np.arange(ze),
                             indexing="ij")
    px = ix * sx - center[0]
    py = iy * sy - center[1]
    pz = iz * sz - center[2]
    dot = px * u[0] + py * u[1] + pz * u[2]
    dx = px - dot * u[0]
    dy = py - dot * u[1]
    dz = pz - dot * u[2]
    dist = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
    # radius evaluated at the volume-z coordinate of the nearest axis point
    axis_z = center[2] + dot * u[2]
    inside = dist <= spec.radius_at(axis_z)

    lumen = LUMEN_CONTRAST if spec.contrast_mode == "contrast" else LUMEN_NONCONTRAST
    rng = np.random.default_rng(seed)
    intensities = np.where(inside, lumen, BACKGROUND).astype(np.float32)
    if spec.noise_sigma > 0:
        intensities += rng.normal(0.0, spec.noise_sigma, inside.shape).astype(np.float32)

    diameter = analytic_max_diameter(spec)
    return PhantomStudy(
        spec=spec,
        volume=StudyVolume(intensities, spec.spacing_mm),
        truth_mask=MaskVolume(inside.astype(np.uint8), spec.spacing_mm),
        analytic_max_diameter_mm=diameter,
        reference_aaa=diameter > 30.0,
    )


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

Z_SPACING_CYCLE = (2.0, 4.0, 6.0, 8.0, 10.0)


def corpus(n, positive_fraction=0.5, seed=0, dims=(64, 64, 32),
           tilt_max_deg=12.0, noise_range=(4.0, 8.0)):
    """Reproducible phantom corpus with patient structure.

    Every fifth study reuses the previous study's patient id, so folds must
    keep those pairs together. Contrast modes alternate and z spacings cycle
    through 2..10 mm. The positive count is round(n * positive_fraction);
    negative diameters stay <= 26 mm and positive ones >= 36 mm.
    """
    if n < 1:
        raise ValueError("corpus needs at least one study")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_fraction))
    labels = np.zeros(n, bool)
    labels[:n_pos] = True
    rng.shuffle(labels)

    studies = []
    patient = -1
    for i in range(n):
        if i % 5 == 4:
            pid = f"p{patient:03d}"        # second study of the same patient
        else:
            patient += 1
            pid = f"p{patient:03d}"
        sz = Z_SPACING_CYCLE[i % len(Z_SPACING_CYCLE)]
        sxy = float(rng.uniform(1.2, 2.0))
        spacing = (sxy, sxy, sz)
        if labels[i]:
            r0 = float(rng.uniform(9.0, 12.0))
            amp = float(rng.uniform(9.0, 14.0))
        else:
            r0 = float(rng.uniform(8.0, 11.0))
            amp = float(rng.uniform(0.0, 2.0))
        z_extent = (dims[2] - 1) * sz
        width = float(rng.uniform(2.0 * sz, 3.0 * sz)) + 6.0
        z0 = float(rng.uniform(0.38, 0.62)) * z_extent
        aneurysm = Aneurysm(z0, amp, width) if amp > 0 else None
        base = PhantomSpec(
            dims=dims, spacing_mm=spacing, base_radius_mm=r0, aneurysm=aneurysm,
            tilt_deg=0.0, contrast_mode="contrast" if i % 2 == 0 else "noncontrast",
            noise_sigma=float(rng.uniform(*noise_range)),
            patient_id=pid, study_id=f"s{i:03d}",
        )
        want_tilt = float(rng.uniform(0.0, tilt_max_deg))
        tilt = min(want_tilt, max_feasible_tilt_deg(base))
        spec = _replace_tilt(base, tilt)
        studies.append(generate(spec, seed=int(rng.integers(0, 2 ** 63 - 1))))
    return studies
