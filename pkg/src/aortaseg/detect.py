"""Study-level aneurysm classification and evaluation metrics.

A study is called positive when its maximum corrected diameter strictly
exceeds 30 mm; the same strict rule labels the reference side so prediction
and ground truth agree at the boundary. Undefined ratios (empty denominator)
are reported as None, never silently as 0 or 1.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .volumes import MaskVolume

AAA_THRESHOLD_MM = 30.0

SENSITIVITY_BINS = ((30.0, 40.0), (40.0, 50.0), (50.0, math.inf))


def classify_aaa(max_diameter_mm):
    """True iff the diameter strictly exceeds 30 mm; a missing diameter
    (no aorta found) is negative."""
    if max_diameter_mm is None:
        return False
    if max_diameter_mm < 0:
        raise ValueError(f"diameter cannot be negative, got {max_diameter_mm}")
    return max_diameter_mm > AAA_THRESHOLD_MM


@dataclass
class StudyReport:
    study_id: str
    max_diameter_mm: Optional[float]
    predicted_aaa: bool
    no_aorta_found: bool = False
    reference_diameter_mm: Optional[float] = None
    reference_aaa: Optional[bool] = None
    dice: Optional[float] = None
    delta_mm: Optional[float] = None
    ct_type: Optional[str] = None       # "contrast" | "noncontrast"
    fold: Optional[int] = None

    def __post_init__(self):
        if self.max_diameter_mm is not None:
            if self.predicted_aaa != (self.max_diameter_mm > AAA_THRESHOLD_MM):
                raise ValueError(
                    f"{self.study_id}: predicted_aaa inconsistent with diameter "
                    f"{self.max_diameter_mm}")
        if (self.delta_mm is None and self.max_diameter_mm is not None
                and self.reference_diameter_mm is not None):
            self.delta_mm = self.max_diameter_mm - self.reference_diameter_mm


def make_report(study_id, max_diameter_mm, **kwargs):
    """StudyReport with the classification fields derived from the diameter."""
    return StudyReport(
        study_id=study_id,
        max_diameter_mm=max_diameter_mm,
        predicted_aaa=classify_aaa(max_diameter_mm),
        no_aorta_found=max_diameter_mm is None,
        **kwargs,
    )


def dice_score(pred: MaskVolume, ref: MaskVolume):
    """Plain overlap Dice 2|P&G| / (|P|+|G|); both-empty counts as 1.0."""
    if pred.dims != ref.dims:
        raise ValueError(f"mask dims differ: {pred.dims} vs {ref.dims}")
    p = pred.data != 0
    g = ref.data != 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def confusion_metrics(reports):
    """(sensitivity, specificity, counts dict); None where undefined."""
    if not reports:
        raise ValueError("no reports to evaluate")
    tp = fn = tn = fp = 0
    for r in reports:
        if r.reference_aaa is None:
            raise ValueError(f"{r.study_id}: reference_aaa missing")
        if r.reference_aaa:
            tp, fn = (tp + 1, fn) if r.predicted_aaa else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if r.predicted_aaa else (fp, tn + 1)
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return sens, spec, {"tp": tp, "fn": fn, "tn": tn, "fp": fp}


def stratified_sensitivity(reports, bins=SENSITIVITY_BINS):
    """Per-bin sensitivity over reference-positive studies, binned by the
    reference diameter (left-closed bins). Empty bins yield None."""
    out = []
    for lo, hi in bins:
        tp = fn = 0
        for r in reports:
            if not r.reference_aaa:
                continue
            if r.reference_diameter_mm is None:
                raise ValueError(f"{r.study_id}: positive study lacks reference diameter")
            if lo <= r.reference_diameter_mm < hi:
                if r.predicted_aaa:
                    tp += 1
                else:
                    fn += 1
        out.append(tp / (tp + fn) if tp + fn else None)
    return out


def pooled_std(groups):
    """Pooled standard deviation from per-group (n, std) pairs:
    sqrt(sum((n_i - 1) s_i^2) / sum(n_i - 1))."""
    groups = list(groups)
    if not groups:
        raise ValueError("pooled_std needs at least one group")
    for n, _ in groups:
        if n < 2:
            raise ValueError(f"pooled_std needs n >= 2 per group, got n={n}")
    num = sum((n - 1) * s * s for n, s in groups)
    den = sum(n - 1 for n, _ in groups)
    return math.sqrt(num / den)


@dataclass
class SummaryRow:
    label: str
    n: int
    mean_dice: Optional[float]
    dice_std: Optional[float]
    mean_delta_mm: Optional[float]
    delta_std_mm: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(arr) >= 2 else 0.0
    return mean, std


def _row(label, reports):
    dices = [r.dice for r in reports if r.dice is not None]
    deltas = [r.delta_mm for r in reports if r.delta_mm is not None]
    mean_dice, dice_std = _mean_std(dices)
    mean_delta, delta_std = _mean_std(deltas)
    if any(r.reference_aaa is not None for r in reports):
        sens, spec, _ = confusion_metrics(
            [r for r in reports if r.reference_aaa is not None])
    else:
        sens, spec = None, None
    return SummaryRow(label, len(reports), mean_dice, dice_std,
                      mean_delta, delta_std, sens, spec)


def aggregate_report(reports, grouping="overall"):
    """Summary rows for the requested grouping plus a combined row.

    The combined row's means and the confusion counts are recomputed from the
    raw per-study values; its standard deviations pool the per-group ones by
    degrees of freedom (groups of size 1 carry none).
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    if grouping == "overall":
        return [_row("all", reports)]
    if grouping == "ct_type":
        keys = ["contrast", "noncontrast"]
        def key(r):
            if r.ct_type not in keys:
                raise ValueError(f"{r.study_id}: missing or unknown ct_type {r.ct_type!r}")
            return r.ct_type
    elif grouping == "fold":
        def key(r):
            if r.fold is None:
                raise ValueError(f"{r.study_id}: missing fold")
            return r.fold
        keys = sorted({key(r) for r in reports})
    else:
        raise ValueError(f"unknown grouping {grouping!r}")

    rows = []
    for k in keys:
        members = [r for r in reports if key(r) == k]
        if members:
            rows.append(_row(str(k), members))
    combined = _row("all", reports)
    # pooled stds from the group rows (Table-style aggregation)
    for attr_n, attr_std in (("mean_dice", "dice_std"), ("mean_delta_mm", "delta_std_mm")):
        groups = [(r.n, getattr(r, attr_std)) for r in rows
                  if r.n >= 2 and getattr(r, attr_std) is not None]
        if groups:
            setattr(combined, attr_std, pooled_std(groups))
    rows.append(combined)
    return rows
