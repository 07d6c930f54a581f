"""Segmentation metrics: overlap, surface distance, precision and slice-wise Betti-0 error.

All functions take binary ``(H, W, S)`` volumes. Metrics that are undefined
for a given input (e.g. ASSD with an empty mask) return ``None``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError

DEFAULT_SPACING = (0.3645, 0.3645, 0.7)
METRIC_KEYS = ("dsc", "voe", "assd", "betti0_error", "precision_fg", "precision_bg",
               "precision_fg_eroded", "precision_bg_eroded")


def _pair(a, b):
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"extent mismatch {a.shape} vs {b.shape}")
    return a, b


def dsc(pred, gt) -> float:
    a, b = _pair(pred, gt)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def voe(pred, gt) -> float:
    a, b = _pair(pred, gt)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(1.0 - np.logical_and(a, b).sum() / union)


_FACES = ndimage.generate_binary_structure(3, 1)


def surface(mask) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (or the volume)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_FACES, border_value=0)


def assd(pred, gt, spacing=DEFAULT_SPACING) -> float | None:
    """Average symmetric surface distance in physical units; None if a mask is empty."""
    a, b = _pair(pred, gt)
    if not a.any() or not b.any():
        return None
    sa, sb = surface(a), surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    d = np.concatenate([dist_to_b[sa], dist_to_a[sb]])
    return float(d.mean())


def precision(pred, gt) -> float | None:
    a, b = _pair(pred, gt)
    n = a.sum()
    if n == 0:
        return None
    return float(np.logical_and(a, b).sum() / n)


_EIGHT = np.ones((3, 3), dtype=int)
_FOUR = ndimage.generate_binary_structure(2, 1)


def count_components(slice2d, connectivity: int = 8) -> int:
    _, n = ndimage.label(np.asarray(slice2d).astype(bool),
                         structure=_EIGHT if connectivity == 8 else _FOUR)
    return int(n)


def betti0_error(pred, gt, axis: int = 2, connectivity: int = 8) -> float:
    """Mean over slices along ``axis`` of |#components(pred) - #components(gt)|."""
    a, b = _pair(pred, gt)
    a, b = np.moveaxis(a, axis, 0), np.moveaxis(b, axis, 0)
    errs = [abs(count_components(pa, connectivity) - count_components(pb, connectivity))
            for pa, pb in zip(a, b)]
    return float(np.mean(errs))


def fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def round6(v):
    if v is None or isinstance(v, (bool, int, str)):
        return v
    if isinstance(v, float):
        return None if not math.isfinite(v) else float(f"{v:.6g}")
    if isinstance(v, dict):
        return {k: round6(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [round6(x) for x in v]
    if isinstance(v, np.generic):
        return round6(v.item())
    return v


def canonical_json(obj) -> str:
    return json.dumps(round6(obj), sort_keys=True, indent=1) + "\n"


@dataclass
class MetricsReport:
    per_volume: list = field(default_factory=list)  # dicts keyed by METRIC_KEYS (+ "id")
    keys: tuple = METRIC_KEYS

    def add(self, row: dict):
        self.per_volume.append(row)

    def aggregate(self) -> dict:
        out = {}
        for k in self.keys:
            vals = [r[k] for r in self.per_volume if r.get(k) is not None]
            out[k] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
                "n": len(vals),
                "excluded": len(self.per_volume) - len(vals),
            }
        return out

    def to_json(self) -> str:
        return canonical_json({"per_volume": self.per_volume, "aggregate": self.aggregate()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + tuple(self.keys))
        for i, r in enumerate(self.per_volume):
            w.writerow([r.get("id", i)] + [fmt(r.get(k)) for k in self.keys])
        return buf.getvalue()


def evaluate_volume(pred, gt, spacing=DEFAULT_SPACING, betti_axis: int = 2,
                    connectivity: int = 8) -> dict:
    """Overlap, surface and continuity metrics of one predicted volume."""
    return {
        "dsc": dsc(pred, gt),
        "voe": voe(pred, gt),
        "assd": assd(pred, gt, spacing),
        "betti0_error": betti0_error(pred, gt, betti_axis, connectivity),
    }
