"""Overlap and boundary metrics per tumour subregion, plus report aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

REGIONS = ("NETC", "SNFH", "ET", "RC", "WT")
METRICS = ("dice", "iou", "hd95")
REPORT_COLUMNS = ("case_id", "region", "dice", "iou", "hd95")
Z_95 = 1.96

_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def overlap_counts(pred, truth):
    """``(|P∩G|, |P|, |G|, |P∪G|)`` as Python ints."""
    pred, truth = _pair(pred, truth)
    inter = int(np.count_nonzero(pred & truth))
    return inter, int(pred.sum()), int(truth.sum()), int(np.count_nonzero(pred | truth))


def dice_iou_metrics(pred, truth):
    inter, p, g, union = overlap_counts(pred, truth)
    if union == 0:
        return {"dice": 1.0, "iou": 1.0}
    return {"dice": 2 * inter / (p + g), "iou": inter / union}


def boundary(mask):
    """Voxels of ``mask`` with a face neighbour outside the mask or the grid."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        structure = _SIX
    else:
        structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def grid_diagonal(shape, spacing):
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing)))


def _directed(src, dst, spacing):
    """Distance from each ``src`` voxel to its nearest ``dst`` voxel."""
    _, idx = ndimage.distance_transform_edt(~dst, sampling=spacing, return_distances=True, return_indices=True)
    pts = np.argwhere(src)
    nearest = idx[(slice(None),) + tuple(pts.T)].T
    diff = (pts - nearest) * np.asarray(spacing, dtype=np.float64)
    return np.sqrt((diff**2).sum(axis=-1))


def nearest_rank(values, q=95):
    """Smallest value with at least ``q`` percent of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty sample")
    rank = -(-q * v.size // 100)  # ceil(q n / 100)
    return float(v[max(rank, 1) - 1])


def hd95(pred, truth, spacing=(1.0, 1.0, 1.0)):
    pred, truth = _pair(pred, truth)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != pred.ndim:
        raise ValueError(f"spacing {spacing} does not match mask rank {pred.ndim}")
    has_p, has_g = pred.any(), truth.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return grid_diagonal(pred.shape, spacing)
    bp, bg = boundary(pred), boundary(truth)
    pooled = np.concatenate([_directed(bp, bg, spacing), _directed(bg, bp, spacing)])
    return nearest_rank(pooled, 95)


def compose_regions(labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 4):
        raise ValueError(f"label values outside 0..4: min {labels.min()}, max {labels.max()}")
    masks = {"NETC": labels == 1, "SNFH": labels == 2, "ET": labels == 3, "RC": labels == 4}
    masks["WT"] = masks["NETC"] | masks["SNFH"] | masks["ET"]
    return masks


def case_metrics(pred_labels, true_labels, spacing=(1.0, 1.0, 1.0)):
    """``{region: {dice, iou, hd95}}`` for one label-map pair."""
    p, g = compose_regions(pred_labels), compose_regions(true_labels)
    out = {}
    for region in REGIONS:
        row = dice_iou_metrics(p[region], g[region])
        row["hd95"] = hd95(p[region], g[region], spacing)
        out[region] = row
    return out


@dataclass
class Summary:
    mean: float
    uncertainty: float
    n: int


def summarize_values(values):
    """Mean and 1.96 standard errors (two-pass, ``n - 1`` denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError(f"need at least 2 cases to summarize, got {v.size}")
    mean = math.fsum(v) / v.size
    mean += math.fsum(v - mean) / v.size  # corrected two-pass: identical values give sd 0 exactly
    sd = math.sqrt(math.fsum((v - mean) ** 2) / (v.size - 1))
    return Summary(float(mean), Z_95 * sd / math.sqrt(v.size), int(v.size))


def summarize(cases):
    """``cases`` maps case_id -> case_metrics(); returns {region: {metric: Summary}}."""
    if len(cases) < 2:
        raise ValueError(f"need at least 2 cases to summarize, got {len(cases)}")
    return {
        region: {m: summarize_values([c[region][m] for c in cases.values()]) for m in METRICS} for region in REGIONS
    }


def write_report(path, cases):
    """Per-case rows, then ``mean`` and ``ci95`` rows per region (when n >= 2)."""
    fmt = lambda x: format(x, ".17g")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for case_id, regions in cases.items():
            for region in REGIONS:
                r = regions[region]
                w.writerow([case_id, region] + [fmt(r[m]) for m in METRICS])
        if len(cases) >= 2:
            agg = summarize(cases)
            for label, attr in (("mean", "mean"), ("ci95", "uncertainty")):
                for region in REGIONS:
                    w.writerow([label, region] + [fmt(getattr(agg[region][m], attr)) for m in METRICS])


def read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for m in METRICS:
            r[m] = float(r[m])
    return rows
