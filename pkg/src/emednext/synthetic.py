"""Nested-sphere phantoms and an ideal stand-in model for end-to-end checks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import PointwiseModel, save_model
from .preprocess import MODALITIES
from .volume import GridGeometry, LabelMap, Volume, write_nifti

BRAIN = 100.0
LESION = 300.0


def _ball(shape, center, radius, spacing=(1.0, 1.0, 1.0)):
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    d2 = sum(((g - c) * s) ** 2 for g, c, s in zip(grids, center, spacing))
    return d2 <= radius**2


def nested_phantom(shape=(96, 96, 72), spacing=(1.0, 1.0, 1.0), radii=(14.0, 9.0, 6.0),
                   brain_radii=(36.0, 40.0, 30.0), center=None, jitter: int = 0, seed: int = 0):
    """Four modalities ``[FLAIR, T1, T1ce, T2]`` and labels for ET < TC < WT spheres in an ellipsoidal brain.

    FLAIR is bright over WT, T2 over TC and T1ce over ET, so each region is
    recoverable from a single channel.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    c0 = np.array(center if center is not None else [n / 2 for n in shape], dtype=float)
    if jitter:
        c0 = c0 + rng.integers(-jitter, jitter + 1, size=3)
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    brain = sum(((g - c) * s / r) ** 2 for g, c, s, r in zip(grids, c0, spacing, brain_radii)) <= 1
    r_wt, r_tc, r_et = radii
    wt = _ball(shape, c0, r_wt, spacing) & brain
    tc = _ball(shape, c0, r_tc, spacing) & brain
    et = _ball(shape, c0, r_et, spacing) & brain

    base = np.where(brain, BRAIN, 0.0)
    flair = np.where(wt, LESION, base)
    t1 = base.copy()
    t1ce = np.where(et, LESION, base)
    t2 = np.where(tc, LESION, base)
    geom = GridGeometry(shape, spacing)
    vols = [Volume(a.astype(np.float32), geom) for a in (flair, t1, t1ce, t2)]
    labels = np.zeros(shape, dtype=np.int16)
    labels[wt] = 1
    labels[tc] = 2
    labels[et] = 3
    return vols, LabelMap(labels, geom)


def _normalized_levels(vol: Volume) -> tuple[float, float]:
    x = vol.data[0].astype(np.float64)
    vals = x[x != 0]
    mean, std = vals.mean(), vals.std()
    if std == 0:
        return 0.0, 0.0
    return (BRAIN - mean) / std, (LESION - mean) / std


def ideal_pointwise_model(modalities, sharpness: float = 40.0, in_channels: int = 5) -> PointwiseModel:
    """Logits that threshold FLAIR / T2 / T1ce halfway between brain and lesion levels.

    Output channel order is (TC, WT, ET).
    """
    source = {"tc": 3, "wt": 0, "et": 2}
    weight = np.zeros((3, in_channels))
    bias = np.zeros(3)
    for row, cls in enumerate(("tc", "wt", "et")):
        lo, hi = _normalized_levels(modalities[source[cls]])
        k = sharpness / (hi - lo)
        weight[row, source[cls]] = k
        bias[row] = -k * (lo + hi) / 2
    return PointwiseModel(weight, bias)


def write_case(root, case_id: str, modalities, label: LabelMap | None = None) -> Path:
    case_dir = Path(root) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for name, vol in zip(MODALITIES, modalities):
        write_nifti(vol, case_dir / f"{case_id}-{name}.nii.gz")
    if label is not None:
        write_nifti(label, case_dir / f"{case_id}-seg.nii.gz")
    return case_dir


def write_ideal_model(directory, modalities, **kw) -> Path:
    save_model(ideal_pointwise_model(modalities, **kw), directory)
    return Path(directory)
