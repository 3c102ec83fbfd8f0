"""Sliding-window prediction, flip TTA and two-pass weighted ensembling.

Probabilities use channel order (TC, WT, ET) throughout.
"""

from __future__ import annotations

import itertools
import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .layers import sigmoid
from .preprocess import CaseMeta, invert_crop_pad, resample_array
from .volume import GridGeometry, LabelMap, ProbMaps, Volume

CLASSES = ("tc", "wt", "et")

Model = Callable[[np.ndarray], np.ndarray]


class SlidingWindowError(ValueError):
    pass


@dataclass(frozen=True)
class SlidingWindowConfig:
    patch_shape: tuple[int, int, int] = (160, 160, 128)
    overlap_fraction: float = 0.5
    blend: str = "gaussian"
    sigma_scale: float = 1.0 / 8
    tta_passes: int = 8

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        if not 0 <= self.overlap_fraction < 1:
            raise SlidingWindowError("overlap must lie in [0, 1)")
        if self.blend not in ("gaussian", "uniform"):
            raise SlidingWindowError(f"unknown blend {self.blend!r}")
        if self.tta_passes not in (1, 7, 8):
            raise SlidingWindowError("tta_passes must be 1, 7 or 8")

    @property
    def strides(self) -> tuple[int, int, int]:
        return tuple(max(1, int(round(p * (1 - self.overlap_fraction)))) for p in self.patch_shape)


def window_starts(length: int, patch: int, stride: int) -> list[int]:
    if patch > length:
        raise SlidingWindowError(f"patch {patch} larger than volume axis {length}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def importance_map(patch_shape, blend: str = "gaussian", sigma_scale: float = 1.0 / 8) -> np.ndarray:
    if blend == "uniform":
        return np.ones(patch_shape)
    axes = []
    for p in patch_shape:
        x = np.arange(p) - (p - 1) / 2
        axes.append(np.exp(-0.5 * (x / (p * sigma_scale)) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    # keep strictly positive so every covered voxel has nonzero total weight
    return np.maximum(w, 1e-3)


def sliding_window_predict(vol: Volume | np.ndarray, model: Model,
                           cfg: SlidingWindowConfig = SlidingWindowConfig()) -> ProbMaps:
    """Tile the volume, run ``model`` per patch and blend sigmoid outputs."""
    if isinstance(vol, Volume):
        data, geom = vol.data, vol.geometry
    else:
        data = np.asarray(vol, dtype=np.float32)
        geom = GridGeometry(data.shape[1:])
    shape = data.shape[1:]
    starts = [window_starts(n, p, s) for n, p, s in zip(shape, cfg.patch_shape, cfg.strides)]
    weight = importance_map(cfg.patch_shape, cfg.blend, cfg.sigma_scale)
    acc = np.zeros((3,) + shape)
    norm = np.zeros(shape)
    for corner in itertools.product(*starts):
        region = tuple(slice(c, c + p) for c, p in zip(corner, cfg.patch_shape))
        logits = np.asarray(model(data[(slice(None),) + region]))
        if logits.shape != (3,) + cfg.patch_shape:
            raise SlidingWindowError(f"model returned {logits.shape}, expected {(3,) + cfg.patch_shape}")
        acc[(slice(None),) + region] += sigmoid(logits.astype(np.float64)) * weight
        norm[region] += weight
    probs = np.clip(acc / norm, 0.0, 1.0)
    return ProbMaps.from_array(probs.astype(np.float32), geom)


def flip_combinations(passes: int = 8) -> list[tuple[int, ...]]:
    """Identity first, then single, double and triple axis flips."""
    combos = [c for r in range(4) for c in itertools.combinations(range(3), r)]
    return combos[:passes]


def tta_predict(vol: Volume, model: Model, cfg: SlidingWindowConfig = SlidingWindowConfig()) -> ProbMaps:
    """Average sliding-window predictions over axis flips, each un-flipped first."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float32)
    geom = vol.geometry if isinstance(vol, Volume) else GridGeometry(data.shape[1:])
    total = np.zeros((3,) + data.shape[1:])
    combos = flip_combinations(cfg.tta_passes)
    for axes in combos:
        spatial = tuple(a + 1 for a in axes)
        x = np.flip(data, spatial) if axes else data
        pred = sliding_window_predict(np.ascontiguousarray(x), model, cfg).stack().astype(np.float64)
        total += np.flip(pred, spatial) if axes else pred
    return ProbMaps.from_array(np.clip(total / len(combos), 0, 1).astype(np.float32), geom)


# ---------------------------------------------------------------------------
# two-pass ensemble
# ---------------------------------------------------------------------------


class EnsembleError(ValueError):
    pass


def check_weights(weights) -> np.ndarray:
    """Validate an ``(M, 3)`` weight table: non-negative, positive column sums."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != 3:
        raise EnsembleError(f"weights must be (models, 3), got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise EnsembleError("weights must be finite and non-negative")
    if np.any(w.sum(axis=0) <= 0):
        raise EnsembleError("every class needs a positive total weight")
    return w


class EnsembleAccumulator:
    """Running per-class weighted sums plus weight totals for one case.

    On disk: ``<dir>/{tc,wt,et}.f64`` (raw little-endian float64 sums in
    x-fastest order) and ``state.json`` with geometry, models seen and totals.
    """

    def __init__(self, geometry: GridGeometry, sums=None, totals=None, models=None):
        self.geometry = geometry
        self.sums = np.zeros((3,) + geometry.shape) if sums is None else np.asarray(sums, dtype=np.float64)
        self.totals = [0.0, 0.0, 0.0] if totals is None else [float(t) for t in totals]
        self.models: list[dict] = [] if models is None else list(models)

    def has_model(self, model_id: str) -> bool:
        return any(m["id"] == model_id for m in self.models)

    def save(self, directory) -> None:
        """Write atomically: stage everything, then swap directories."""
        final = Path(directory)
        staging = final.with_name(final.name + ".staging")
        old = final.with_name(final.name + ".old")
        shutil.rmtree(staging, ignore_errors=True)
        staging.mkdir(parents=True)
        for c, name in enumerate(CLASSES):
            self.sums[c].ravel(order="F").astype("<f8").tofile(staging / f"{name}.f64")
        state = {
            "shape": list(self.geometry.shape),
            "spacing": list(self.geometry.spacing),
            "origin": list(self.geometry.origin),
            "models": self.models,
            "totals": self.totals,
        }
        tmp = staging / "state.json.tmp"
        tmp.write_text(json.dumps(state, indent=2))
        os.replace(tmp, staging / "state.json")
        if final.exists():
            shutil.rmtree(old, ignore_errors=True)
            os.replace(final, old)
        os.replace(staging, final)
        shutil.rmtree(old, ignore_errors=True)

    @classmethod
    def load(cls, directory) -> EnsembleAccumulator | None:
        """Load a persisted accumulator, finishing an interrupted swap if needed."""
        final = Path(directory)
        staging = final.with_name(final.name + ".staging")
        old = final.with_name(final.name + ".old")
        if not final.exists() and (staging / "state.json").is_file():
            os.replace(staging, final)
        shutil.rmtree(staging, ignore_errors=True)
        shutil.rmtree(old, ignore_errors=True)
        if not (final / "state.json").is_file():
            return None
        state = json.loads((final / "state.json").read_text())
        geom = GridGeometry(tuple(state["shape"]), tuple(state["spacing"]), tuple(state["origin"]))
        sums = np.empty((3,) + geom.shape)
        for c, name in enumerate(CLASSES):
            flat = np.fromfile(final / f"{name}.f64", dtype="<f8")
            if flat.size != np.prod(geom.shape):
                raise EnsembleError(f"corrupt accumulator blob {name}.f64")
            sums[c] = flat.reshape(geom.shape, order="F")
        return cls(geom, sums, state["totals"], state["models"])


def accumulate_model(acc: EnsembleAccumulator, probs: ProbMaps, w_m, model_id: str | None = None,
                     directory=None) -> EnsembleAccumulator:
    """Add ``w_m[c] * P_c`` to the running sums; persist if ``directory`` is given."""
    if probs.geometry.shape != acc.geometry.shape:
        raise EnsembleError(f"probabilities {probs.geometry.shape} do not match accumulator {acc.geometry.shape}")
    w_m = np.asarray(w_m, dtype=np.float64)
    if w_m.shape != (3,) or np.any(w_m < 0):
        raise EnsembleError("per-model weights must be 3 non-negative reals")
    for c, name in enumerate(CLASSES):
        if w_m[c] == 0:
            continue
        acc.sums[c] += w_m[c] * getattr(probs, name).astype(np.float64)
        acc.totals[c] += float(w_m[c])
    acc.models.append({"id": model_id if model_id is not None else f"model{len(acc.models)}",
                       "weights": [float(v) for v in w_m]})
    if directory is not None:
        acc.save(directory)
    return acc


def normalize_ensemble(acc: EnsembleAccumulator) -> ProbMaps:
    """Divide each class sum by its total weight (weighted average over models)."""
    if any(t <= 0 for t in acc.totals):
        raise EnsembleError(f"class weight totals must be positive, got {acc.totals}")
    out = acc.sums / np.asarray(acc.totals)[:, None, None, None]
    return ProbMaps.from_array(np.clip(out, 0, 1).astype(np.float32), acc.geometry)


def ensemble_average(prob_list: list[ProbMaps], weights) -> ProbMaps:
    """In-memory convenience: accumulate all models then normalize."""
    w = check_weights(weights)
    if len(prob_list) != w.shape[0]:
        raise EnsembleError("one weight row per model is required")
    acc = EnsembleAccumulator(prob_list[0].geometry)
    for probs, row in zip(prob_list, w):
        accumulate_model(acc, probs, row)
    return normalize_ensemble(acc)


# ---------------------------------------------------------------------------
# back to the original grid
# ---------------------------------------------------------------------------


def _original_geometry(meta: CaseMeta) -> GridGeometry:
    return GridGeometry(meta.original_shape, meta.original_spacing, meta.original_origin)


def restore_array(arr: np.ndarray, meta: CaseMeta, mode: str) -> np.ndarray:
    grid = invert_crop_pad(arr, meta)
    scales = [o / t for o, t in zip(meta.original_spacing, meta.target_spacing)]
    return resample_array(grid, meta.original_shape, scales, mode)


def restore_to_original_space(obj: ProbMaps | LabelMap, meta: CaseMeta) -> ProbMaps | LabelMap:
    """Undo crop/pad and resampling; voxels outside the ROI become background."""
    if tuple(obj.geometry.shape) != meta.model_shape:
        raise ValueError(f"prediction shape {obj.geometry.shape} does not match meta {meta.model_shape}")
    geom = _original_geometry(meta)
    if isinstance(obj, LabelMap):
        return LabelMap(restore_array(obj.labels, meta, "nearest"), geom)
    out = restore_array(obj.stack().astype(np.float64), meta, "linear")
    return ProbMaps.from_array(np.clip(out, 0, 1).astype(np.float32), geom)
