"""Dice and 95th-percentile Hausdorff distance for label masks.

Distances are in voxel units unless a per-axis ``spacing`` is given.
Surface points are foreground voxels with at least one face-adjacent
neighbour that is background or outside the array.
"""

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy import ndimage

CHUNK = 2048


def dice(gt, pred):
    gt = np.asarray(gt).astype(bool)
    pred = np.asarray(pred).astype(bool)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    denom = gt.sum() + pred.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(gt, pred).sum() / denom)


def surface_points(mask):
    """Integer coordinates (n x ndim) of the mask's face-connected boundary."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def directed_distances(src, dst, spacing=None):
    """For each point in ``src`` the Euclidean distance to its nearest point in ``dst``."""
    src = np.asarray(src)
    dst = np.asarray(dst)
    if spacing is not None:
        src = src * np.asarray(spacing, dtype=np.float64)
        dst = dst * np.asarray(spacing, dtype=np.float64)
    elif src.dtype.kind in "iu" and dst.dtype.kind in "iu":
        # integer squared distances keep the result exact
        src = src.astype(np.int64)
        dst = dst.astype(np.int64)
    out = np.empty(len(src), dtype=np.float64)
    for start in range(0, len(src), CHUNK):
        block = src[start:start + CHUNK]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + CHUNK] = np.sqrt(d2.min(axis=1))
    return out


def percentile(values, q):
    """Linear interpolation between order statistics: s[lo] + (s[hi] - s[lo]) * frac."""
    s = np.sort(np.asarray(values, dtype=np.float64))
    pos = (len(s) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return float(s[lo] + (s[hi] - s[lo]) * (pos - lo))


def hd95(gt_surface, pred_surface, spacing=None, q=95.0):
    """max of the two directed q-th percentile surface distances; None if a set is empty.

    Percentiles interpolate linearly between order statistics.
    """
    gt_surface = np.asarray(gt_surface)
    pred_surface = np.asarray(pred_surface)
    if len(gt_surface) == 0 or len(pred_surface) == 0:
        return None
    a = percentile(directed_distances(gt_surface, pred_surface, spacing), q)
    b = percentile(directed_distances(pred_surface, gt_surface, spacing), q)
    return float(max(a, b))


def hausdorff(gt_surface, pred_surface, spacing=None):
    """Plain (100th percentile) Hausdorff distance."""
    return hd95(gt_surface, pred_surface, spacing, q=100.0)


def hd95_masks(gt, pred, spacing=None):
    return hd95(surface_points(gt), surface_points(pred), spacing)


@dataclass
class ClassMetrics:
    name: str
    dice: float
    hd95: Optional[float]
    hd95_undefined: int = 0


@dataclass
class MetricsReport:
    per_class: List[ClassMetrics] = field(default_factory=list)
    mean_dice: float = 0.0
    mean_hd95: Optional[float] = None

    def to_json(self):
        return asdict(self)


def evaluate_masks(gt, pred, class_names, spacing=None):
    """Per-class Dice/HD95 averaged over samples.

    ``gt`` and ``pred`` are integer label arrays (N x spatial) with 0 as
    background and class q at value q. HD95 cases with an empty surface
    are skipped and counted in ``hd95_undefined``.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    report = MetricsReport()
    for q, name in enumerate(class_names, start=1):
        dices, hds, undefined = [], [], 0
        for g, p in zip(gt, pred):
            gm, pm = g == q, p == q
            dices.append(dice(gm, pm))
            h = hd95_masks(gm, pm, spacing)
            if h is None:
                undefined += 1
            else:
                hds.append(h)
        report.per_class.append(
            ClassMetrics(name, float(np.mean(dices)), float(np.mean(hds)) if hds else None, undefined)
        )
    report.mean_dice = float(np.mean([c.dice for c in report.per_class]))
    defined = [c.hd95 for c in report.per_class if c.hd95 is not None]
    report.mean_hd95 = float(np.mean(defined)) if defined else None
    return report
