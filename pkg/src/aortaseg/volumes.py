"""Volume carriers: an intensity grid and a binary mask, each with spacing.

Arrays are [X, Y, Z]; spacing_mm is (sx, sy, sz) in millimetres, so voxel
(i, j, k) sits at physical position (i*sx, j*sy, k*sz).
"""

from dataclasses import dataclass

import numpy as np


def _check_spacing(spacing_mm):
    s = tuple(float(v) for v in spacing_mm)
    if len(s) != 3 or any(v <= 0 for v in s):
        raise ValueError(f"spacing must be three positive values, got {spacing_mm}")
    return s


@dataclass
class StudyVolume:
    data: np.ndarray          # [X, Y, Z] float32 intensities
    spacing_mm: tuple

    def __post_init__(self):
        self.spacing_mm = _check_spacing(self.spacing_mm)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-d, got shape {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class MaskVolume:
    data: np.ndarray          # [X, Y, Z] uint8 in {0, 1}
    spacing_mm: tuple

    def __post_init__(self):
        self.spacing_mm = _check_spacing(self.spacing_mm)
        if self.data.ndim != 3:
            raise ValueError(f"mask must be 3-d, got shape {self.data.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        bad = (self.data > 1).sum()
        if bad:
            raise ValueError(f"mask voxels must be 0 or 1 ({bad} other values found)")

    @property
    def dims(self):
        return self.data.shape

    def voxel_count(self):
        return int(self.data.sum())
