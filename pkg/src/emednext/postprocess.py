"""Thresholding, component pruning, hierarchy enforcement and label fusion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import LabelMap, ProbMaps

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class PostprocessConfig:
    """Defaults: final-submission thresholds, component filters of the main method."""

    tau_tc: float = 0.625
    tau_wt: float = 0.5
    tau_et: float = 0.625
    gamma_tc: int = 150
    gamma_wt: int = 500
    gamma_et: int = 100
    eta_tc: float = 0.1
    eta_wt: float = 0.1
    eta_et: float = 0.1
    max_components: int = 10

    def __post_init__(self):
        for c in ("tc", "wt", "et"):
            if not 0 < getattr(self, f"tau_{c}") < 1:
                raise ValueError(f"tau_{c} must lie in (0, 1)")
            if getattr(self, f"gamma_{c}") < 1:
                raise ValueError(f"gamma_{c} must be >= 1")
            if not 0 <= getattr(self, f"eta_{c}") <= 1:
                raise ValueError(f"eta_{c} must lie in [0, 1]")
        if self.max_components < 1:
            raise ValueError("max_components must be >= 1")

    def for_class(self, c: str) -> tuple[float, int, float]:
        return getattr(self, f"tau_{c}"), getattr(self, f"gamma_{c}"), getattr(self, f"eta_{c}")

    @classmethod
    def from_dict(cls, d: dict) -> PostprocessConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown postprocess keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> PostprocessConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# preset threshold sets
PRESETS = {
    "final": PostprocessConfig(),
    "final_small_et": PostprocessConfig(gamma_et=30),
    "tau_0.5": PostprocessConfig(tau_tc=0.5, tau_wt=0.5, tau_et=0.5),
    "tau_0.7": PostprocessConfig(tau_tc=0.7, tau_wt=0.5, tau_et=0.7),
}


@dataclass(frozen=True)
class ComponentStats:
    id: int
    voxel_count: int
    mean_prob: float
    bbox: tuple[int, int, int, int, int, int]


def threshold_channels(probs: ProbMaps, cfg: PostprocessConfig) -> dict[str, np.ndarray]:
    """Binary masks ``P_c >= tau_c`` (inclusive)."""
    return {c: getattr(probs, c) >= cfg.for_class(c)[0] for c in ("tc", "wt", "et")}


def label_components_26(mask: np.ndarray, probs: np.ndarray | None = None):
    """26-connected labelling; ids 1..K follow first voxel in x-fastest scan order.

    Returns ``(labels, stats)``. ``stats`` is empty when ``probs`` is None.
    """
    mask = np.asarray(mask, dtype=bool)
    raw, k = ndimage.label(mask, structure=STRUCTURE_26)
    if k == 0:
        return raw.astype(np.int32), []
    flat = raw.ravel(order="F")
    nz = np.flatnonzero(flat)
    _, first_idx = np.unique(flat[nz], return_index=True)  # first occurrence per raw id
    order = np.argsort(nz[first_idx], kind="stable")
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[raw]
    if probs is None:
        return labels, []
    probs = np.asarray(probs, dtype=np.float64)
    ids = np.arange(1, k + 1)
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    sums = np.bincount(labels.ravel(), weights=probs.ravel(), minlength=k + 1)[1:]
    slices = ndimage.find_objects(labels)
    stats = []
    for i, n, s, sl in zip(ids, counts, sums, slices):
        bbox = tuple(x.start for x in sl) + tuple(x.stop - 1 for x in sl)
        stats.append(ComponentStats(int(i), int(n), float(s / n), bbox))
    return labels, stats


def prune_components(mask, probs_channel, gamma: int, eta: float, max_components: int = 10) -> np.ndarray:
    """Keep components with ``size >= gamma`` and ``mean prob >= eta``, at most the largest ``max_components``."""
    labels, stats = label_components_26(mask, probs_channel)
    passing = [s for s in stats if s.voxel_count >= gamma and s.mean_prob >= eta]
    if len(passing) > max_components:
        passing = sorted(passing, key=lambda s: (-s.voxel_count, s.id))[:max_components]
    keep = np.zeros(len(stats) + 1, dtype=bool)
    keep[[s.id for s in passing]] = True
    return keep[labels]


def _prune_class(masks, probs: ProbMaps, cfg: PostprocessConfig, c: str) -> np.ndarray:
    _, gamma, eta = cfg.for_class(c)
    return prune_components(masks[c], getattr(probs, c), gamma, eta, cfg.max_components)


def enforce_hierarchy(et, tc, wt, probs: ProbMaps, cfg: PostprocessConfig):
    """Propagate ET into TC and TC into WT, re-prune, and guarantee ET <= TC <= WT."""
    et = np.asarray(et, dtype=bool)
    tc = np.asarray(tc, dtype=bool) | et
    wt = np.asarray(wt, dtype=bool) | tc
    masks = {"et": et, "tc": tc, "wt": wt}
    et = _prune_class(masks, probs, cfg, "et")
    # re-pruning a superset may drop voxels its subsets still need
    tc = _prune_class(masks, probs, cfg, "tc") | et
    wt = _prune_class(masks, probs, cfg, "wt") | tc
    return et, tc, wt


def fuse_labels(et, tc, wt) -> np.ndarray:
    """Priority fusion ET > TC > WT into labels 3 / 2 / 1 / 0."""
    out = np.zeros(np.shape(et), dtype=np.int16)
    out[np.asarray(wt, dtype=bool)] = 1
    out[np.asarray(tc, dtype=bool)] = 2
    out[np.asarray(et, dtype=bool)] = 3
    return out


def postprocess_pipeline(probs: ProbMaps, cfg: PostprocessConfig = PostprocessConfig()) -> LabelMap:
    masks = threshold_channels(probs, cfg)
    pruned = {c: _prune_class(masks, probs, cfg, c) for c in ("tc", "wt", "et")}
    et, tc, wt = enforce_hierarchy(pruned["et"], pruned["tc"], pruned["wt"], probs, cfg)
    return LabelMap(fuse_labels(et, tc, wt), probs.geometry)


def with_overrides(cfg: PostprocessConfig, **overrides) -> PostprocessConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
