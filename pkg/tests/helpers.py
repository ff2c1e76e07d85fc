"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np


def central_diff_grad(scalar_fn, x, eps=1e-4):
    """Central finite differences of scalar_fn with respect to every entry of x.

    scalar_fn takes no arguments and reads x, which is perturbed in place and
    restored. Independent of any backward-pass code by construction.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        jp = scalar_fn()
        flat[i] = orig - eps
        jm = scalar_fn()
        flat[i] = orig
        gflat[i] = (jp - jm) / (2.0 * eps)
    return grad


def rel_grad_err(analytic, numeric):
    """Max absolute deviation normalized by the numeric gradient's magnitude."""
    scale = np.max(np.abs(numeric))
    if scale == 0.0:
        return np.max(np.abs(analytic))
    return np.max(np.abs(analytic - numeric)) / scale


def scalarize(rng, out_shape, dtype=np.float64):
    """Fixed random weights turning a tensor-valued op into a scalar J = sum(w * f)."""
    return rng.standard_normal(out_shape).astype(dtype)


def tilted_cylinder_mask(dims, spacing, radius_mm, tilt_rad, azimuth="x"):
    """Analytic voxelization of an infinite tilted cylinder (tilt from z axis).

    Foreground iff the voxel center's 3D distance to the axis line through
    the volume center is <= radius. Independent of the phantom module: used
    as a geometry oracle.
    """
    import math

    xe, ye, ze = dims
    sx, sy, sz = spacing
    ix, iy, iz = np.meshgrid(np.arange(xe), np.arange(ye), np.arange(ze),
                             indexing="ij")
    px, py, pz = ix * sx, iy * sy, iz * sz
    c = ((xe - 1) * sx / 2.0, (ye - 1) * sy / 2.0, (ze - 1) * sz / 2.0)
    if azimuth == "x":
        u = (math.sin(tilt_rad), 0.0, math.cos(tilt_rad))
    else:
        u = (0.0, math.sin(tilt_rad), math.cos(tilt_rad))
    vx, vy, vz = px - c[0], py - c[1], pz - c[2]
    dot = vx * u[0] + vy * u[1] + vz * u[2]
    dx, dy, dz = vx - dot * u[0], vy - dot * u[1], vz - dot * u[2]
    dist = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
    return (dist <= radius_mm).astype(np.uint8)
