"""Dice, normalized surface Dice and their lesion-wise variants.

Lesion-wise scoring follows the usual challenge convention since no exact
definition is given with the method: ground-truth lesions are 26-connected
components, a predicted component is matched to every GT lesion it touches
after dilating that lesion by ``dilation_vox`` voxels, each GT lesion is
scored against the union of its matches, and every unmatched prediction
contributes a zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .postprocess import STRUCTURE_26, label_components_26
from .volume import LabelMap

REGIONS = {"wt": (1, 2, 3), "tc": (2, 3), "et": (3,)}
METRIC_KEYS = ("dice", "nsd_0.5", "nsd_1.0", "lesionwise_dice", "lesionwise_nsd_0.5", "lesionwise_nsd_1.0")
FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (grid edge counts as outside)."""
    padded = np.pad(mask, 1)
    eroded = ndimage.binary_erosion(padded, structure=FACE_STRUCTURE)[1:-1, 1:-1, 1:-1]
    return mask & ~eroded


def _crop_to_union(pred, gt):
    union = pred | gt
    idx = np.argwhere(union)
    lo = np.maximum(idx.min(axis=0) - 1, 0)
    hi = np.minimum(idx.max(axis=0) + 2, union.shape)
    region = tuple(slice(a, b) for a, b in zip(lo, hi))
    return pred[region], gt[region]


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """Distances (mm) from each surface voxel of one mask to the nearest surface voxel of the other."""
    pred, gt = _pair(pred, gt)
    pred, gt = _crop_to_union(pred, gt)
    # one voxel of zero margin keeps the surface definition identical after cropping
    pred, gt = np.pad(pred, 1), np.pad(gt, 1)
    sp, sg = surface(pred), surface(gt)
    dist_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return dist_to_g[sp], dist_to_p[sg]


def nsd(pred, gt, tolerance_mm: float, spacing=(1.0, 1.0, 1.0)) -> float:
    """Share of both surfaces lying within ``tolerance_mm`` of the other surface."""
    if tolerance_mm <= 0:
        raise ValueError("tolerance must be positive")
    pred, gt = _pair(pred, gt)
    has_p, has_g = bool(pred.any()), bool(gt.any())
    if not has_p and not has_g:
        return 1.0
    if not has_p or not has_g:
        return 0.0
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    hits = int(np.sum(d_pg <= tolerance_mm)) + int(np.sum(d_gp <= tolerance_mm))
    return hits / (d_pg.size + d_gp.size)


def _metric_fn(metric: str, tolerance_mm: float | None, spacing):
    if metric == "dice":
        return dice
    if metric == "nsd":
        if tolerance_mm is None:
            raise ValueError("nsd needs a tolerance")
        return lambda p, g: nsd(p, g, tolerance_mm, spacing)
    raise ValueError(f"unknown metric {metric!r}")


def match_lesions(pred, gt, dilation_vox: int = 1):
    """Return (gt_labels, n_gt, pred_labels, n_pred, matches) where matches[i] lists pred ids for GT lesion i+1."""
    pred, gt = _pair(pred, gt)
    gt_labels, _ = label_components_26(gt)
    pred_labels, _ = label_components_26(pred)
    n_gt, n_pred = int(gt_labels.max()), int(pred_labels.max())
    matches = []
    for i in range(1, n_gt + 1):
        lesion = gt_labels == i
        if dilation_vox > 0:
            lesion = ndimage.binary_dilation(lesion, structure=STRUCTURE_26, iterations=dilation_vox)
        hit = np.unique(pred_labels[lesion])
        matches.append([int(h) for h in hit if h])
    return gt_labels, n_gt, pred_labels, n_pred, matches


def lesionwise(pred, gt, metric: str = "dice", tolerance_mm: float | None = None,
               spacing=(1.0, 1.0, 1.0), dilation_vox: int = 1) -> float:
    """Mean per-lesion score, with zeros for missed lesions and false-positive components."""
    fn = _metric_fn(metric, tolerance_mm, spacing)
    gt_labels, n_gt, pred_labels, n_pred, matches = match_lesions(pred, gt, dilation_vox)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    scores = []
    for i, hit in enumerate(matches, start=1):
        pred_union = np.isin(pred_labels, hit) if hit else np.zeros_like(gt_labels, dtype=bool)
        scores.append(fn(pred_union, gt_labels == i))
    matched = {h for hit in matches for h in hit}
    scores += [0.0] * (n_pred - len(matched))
    return float(np.mean(scores))


def region_masks(labels: LabelMap | np.ndarray) -> dict[str, np.ndarray]:
    arr = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() > 3):
        raise ValueError("label values must lie in {0, 1, 2, 3}")
    return {name: np.isin(arr, values) for name, values in REGIONS.items()}


def evaluate_case(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, spacing=None,
                  dilation_vox: int = 1, tolerances=(0.5, 1.0)) -> dict[str, dict[str, float]]:
    """All six metrics for WT, TC and ET."""
    if spacing is None:
        spacing = gt.geometry.spacing if isinstance(gt, LabelMap) else (1.0, 1.0, 1.0)
    p_regions, g_regions = region_masks(pred), region_masks(gt)
    t05, t10 = tolerances
    row = {}
    for name in ("wt", "tc", "et"):
        p, g = p_regions[name], g_regions[name]
        values = (
            dice(p, g),
            nsd(p, g, t05, spacing),
            nsd(p, g, t10, spacing),
            lesionwise(p, g, "dice", spacing=spacing, dilation_vox=dilation_vox),
            lesionwise(p, g, "nsd", t05, spacing, dilation_vox),
            lesionwise(p, g, "nsd", t10, spacing, dilation_vox),
        )
        row[name] = dict(zip(METRIC_KEYS, values))
    return row


@dataclass
class MetricsReport:
    rows: dict[str, dict[str, dict[str, float]]]

    def cohort_means(self) -> dict[str, dict[str, float]]:
        out = {}
        for cls in ("wt", "tc", "et"):
            vals = [r[cls] for r in self.rows.values()]
            out[cls] = {k: float(np.mean([v[k] for v in vals])) if vals else float("nan") for k in METRIC_KEYS}
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps({"cases": self.rows, "cohort": self.cohort_means()}, indent=2,
                                         sort_keys=True))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "class", *METRIC_KEYS])
            for case_id in sorted(self.rows):
                for cls in ("wt", "tc", "et"):
                    vals = self.rows[case_id][cls]
                    w.writerow([case_id, cls, *(f"{vals[k]:.6f}" for k in METRIC_KEYS)])
