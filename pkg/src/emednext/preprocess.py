"""Intensity cleanup, resampling and ROI standardization for a single case.

Per-case order is fixed: clip -> normalize -> resample -> bbox -> crop/pad.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volume import GridGeometry, LabelMap, Volume

MODALITIES = ("flair", "t1", "t1ce", "t2")


class PreprocessWarning(UserWarning):
    pass


class EmptyForegroundError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    target_shape: tuple[int, int, int] = (160, 160, 128)
    intensity_cap: int = 32767
    add_foreground_channel: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        object.__setattr__(self, "target_shape", tuple(int(s) for s in self.target_shape))
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ValueError("target_spacing must be 3 positive reals")
        if len(self.target_shape) != 3 or any(s <= 0 for s in self.target_shape):
            raise ValueError("target_shape must be 3 positive ints")
        if self.intensity_cap <= 0:
            raise ValueError("intensity_cap must be positive")


@dataclass
class CaseMeta:
    """Everything needed to map model-space predictions back to the input grid."""

    case_id: str
    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    original_origin: tuple[float, float, float]
    target_spacing: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    bbox_min: tuple[int, int, int]
    bbox_max: tuple[int, int, int]
    pad_before: tuple[int, int, int]
    pad_after: tuple[int, int, int]
    crop_before: tuple[int, int, int]
    crop_after: tuple[int, int, int]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("original_shape", "resampled_shape", "bbox_min", "bbox_max",
                     "pad_before", "pad_after", "crop_before", "crop_after"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("original_spacing", "original_origin", "target_spacing"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if any(lo > hi for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise ValueError("bbox_min must not exceed bbox_max")
        if any(v < 0 for v in self.pad_before + self.pad_after + self.crop_before + self.crop_after):
            raise ValueError("pads and crops must be non-negative")

    @property
    def model_shape(self) -> tuple[int, int, int]:
        return tuple(
            hi - lo + 1 + pb + pa - cb - ca
            for lo, hi, pb, pa, cb, ca in zip(
                self.bbox_min, self.bbox_max, self.pad_before, self.pad_after,
                self.crop_before, self.crop_after,
            )
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> CaseMeta:
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> CaseMeta:
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# intensity
# ---------------------------------------------------------------------------


def clip_and_cast(vol: Volume, cap: int = 32767) -> Volume:
    """Zero out negatives and values >= ``cap``, then truncate to integers."""
    data = vol.data.astype(np.float64)
    data[(data < 0) | (data >= cap)] = 0
    return Volume(np.trunc(data), vol.geometry)


def normalize_nonzero(vol: Volume) -> Volume:
    """Per-channel z-score over nonzero voxels; background stays exactly 0.

    Degenerate channels (all zero, or zero spread) emit
    :class:`PreprocessWarning` instead of failing.
    """
    out = np.zeros(vol.data.shape, dtype=np.float64)
    for c in range(vol.channels):
        x = vol.data[c].astype(np.float64)
        mask = x != 0
        if not mask.any():
            warnings.warn(f"channel {c} is entirely zero; left unnormalized", PreprocessWarning, stacklevel=2)
            continue
        vals = x[mask]
        mean = vals.mean()
        std = vals.std()
        if std == 0:
            warnings.warn(f"channel {c} has zero spread over its nonzero voxels; mean removed only",
                          PreprocessWarning, stacklevel=2)
            out[c][mask] = vals - mean
        else:
            out[c][mask] = (vals - mean) / std
    return Volume(out.astype(np.float32), vol.geometry)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing)
    )


def _source_coords(n_out: int, scale: float) -> np.ndarray:
    # voxel-center alignment: output j sits at input coordinate (j + 0.5) * scale - 0.5
    return (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5


def _catmull_rom_axis(arr: np.ndarray, axis: int, n_out: int, scale: float) -> np.ndarray:
    n = arr.shape[axis]
    x = _source_coords(n_out, scale)
    arr = np.moveaxis(arr, axis, 0)
    if n == 1:
        out = np.repeat(arr, n_out, axis=0)
        return np.moveaxis(out, 0, axis)
    # two ghost samples per side by linear extrapolation, so linear data is reproduced exactly
    lo_step = arr[1] - arr[0]
    hi_step = arr[-1] - arr[-2]
    padded = np.concatenate(
        [(arr[0] - 2 * lo_step)[None], (arr[0] - lo_step)[None], arr,
         (arr[-1] + hi_step)[None], (arr[-1] + 2 * hi_step)[None]],
        axis=0,
    )
    # edge samples use the nearest full segment; t may leave [0, 1), which is exact for linear data
    i0 = np.clip(np.floor(x), -1, n - 2).astype(np.int64)
    t = x - i0
    t2, t3 = t * t, t * t * t
    weights = (
        0.5 * (-t3 + 2 * t2 - t),
        0.5 * (3 * t3 - 5 * t2 + 2),
        0.5 * (-3 * t3 + 4 * t2 + t),
        0.5 * (t3 - t2),
    )
    extra = (slice(None),) + (None,) * (arr.ndim - 1)
    out = np.zeros((n_out,) + arr.shape[1:], dtype=np.float64)
    for k, w in enumerate(weights):
        out += w[extra] * padded[i0 + k + 1]  # offset k-1, shifted by 2 ghost rows
    return np.moveaxis(out, 0, axis)


def _linear_axis(arr: np.ndarray, axis: int, n_out: int, scale: float) -> np.ndarray:
    n = arr.shape[axis]
    x = np.clip(_source_coords(n_out, scale), 0, n - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    t = x - i0
    arr = np.moveaxis(arr, axis, 0)
    extra = (slice(None),) + (None,) * (arr.ndim - 1)
    out = (1 - t)[extra] * arr[i0] + t[extra] * arr[i1]
    return np.moveaxis(out, 0, axis)


def _nearest_axis(arr: np.ndarray, axis: int, n_out: int, scale: float) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.clip(np.floor(_source_coords(n_out, scale) + 0.5).astype(np.int64), 0, n - 1)
    return np.take(arr, idx, axis=axis)


_AXIS_KERNELS = {"cubic": _catmull_rom_axis, "linear": _linear_axis, "nearest": _nearest_axis}


def resample_array(arr: np.ndarray, out_shape, scales, mode: str = "cubic") -> np.ndarray:
    """Separable resampling of the last three axes of ``arr``.

    ``scales[d]`` is the number of input voxels per output voxel along axis d.
    """
    kernel = _AXIS_KERNELS[mode]
    lead = arr.ndim - 3
    out = arr if mode == "nearest" else arr.astype(np.float64)
    for d in range(3):
        n_out, scale = int(out_shape[d]), float(scales[d])
        if n_out == out.shape[lead + d] and scale == 1.0:
            continue
        out = kernel(out, lead + d, n_out, scale)
    return out


def resample(vol: Volume, target_spacing, mode: str = "cubic") -> Volume:
    """Resample to ``target_spacing`` (Catmull-Rom by default)."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    geom = vol.geometry
    if target_spacing == geom.spacing:
        return Volume(vol.data.copy(), geom)
    shape = resampled_shape(geom.shape, geom.spacing, target_spacing)
    scales = [t / s for s, t in zip(geom.spacing, target_spacing)]
    data = resample_array(vol.data, shape, scales, mode)
    origin = tuple(o + 0.5 * (t - s) for o, s, t in zip(geom.origin, geom.spacing, target_spacing))
    return Volume(data.astype(np.float32), GridGeometry(shape, target_spacing, origin))


def resample_labels(labels: LabelMap, target_spacing) -> LabelMap:
    geom = labels.geometry
    target_spacing = tuple(float(t) for t in target_spacing)
    if target_spacing == geom.spacing:
        return LabelMap(labels.labels.copy(), geom)
    shape = resampled_shape(geom.shape, geom.spacing, target_spacing)
    scales = [t / s for s, t in zip(geom.spacing, target_spacing)]
    out = resample_array(labels.labels, shape, scales, "nearest")
    origin = tuple(o + 0.5 * (t - s) for o, s, t in zip(geom.origin, geom.spacing, target_spacing))
    return LabelMap(out, GridGeometry(shape, target_spacing, origin))


# ---------------------------------------------------------------------------
# ROI
# ---------------------------------------------------------------------------


def foreground_bbox(vols: list[Volume]) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Inclusive bounds of the union of nonzero voxels over all inputs."""
    if not vols:
        raise ValueError("need at least one volume")
    shape = vols[0].shape
    union = np.zeros(shape, dtype=bool)
    for v in vols:
        if v.shape != shape:
            raise AlignmentError("volumes differ in shape")
        union |= np.any(v.data != 0, axis=0)
    if not union.any():
        raise EmptyForegroundError("no nonzero voxels in any input")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(union.any(axis=other))
        lo.append(int(hits[0]))
        hi.append(int(hits[-1]))
    return tuple(lo), tuple(hi)


def _centered_amounts(n: int, target: int) -> tuple[int, int, int, int]:
    """(pad_before, pad_after, crop_before, crop_after); odd remainder goes high."""
    if n <= target:
        total = target - n
        return total // 2, total - total // 2, 0, 0
    total = n - target
    return 0, 0, total // 2, total - total // 2


def crop_pad_array(arr: np.ndarray, bbox, target_shape):
    lo, hi = bbox
    lead = (slice(None),) * (arr.ndim - 3)
    arr = arr[lead + tuple(slice(a, b + 1) for a, b in zip(lo, hi))]
    pads, crops = [], []
    for d in range(3):
        pb, pa, cb, ca = _centered_amounts(arr.shape[arr.ndim - 3 + d], target_shape[d])
        pads.append((pb, pa))
        crops.append((cb, ca))
    arr = arr[lead + tuple(slice(cb, arr.shape[arr.ndim - 3 + d] - ca) for d, (cb, ca) in enumerate(crops))]
    arr = np.pad(arr, [(0, 0)] * (arr.ndim - 3) + pads)
    frag = {
        "bbox_min": tuple(lo),
        "bbox_max": tuple(hi),
        "pad_before": tuple(p[0] for p in pads),
        "pad_after": tuple(p[1] for p in pads),
        "crop_before": tuple(c[0] for c in crops),
        "crop_after": tuple(c[1] for c in crops),
    }
    return arr, frag


def crop_pad_centered(vol: Volume, bbox, target_shape) -> tuple[Volume, dict]:
    """Crop to ``bbox`` then center-pad (zeros) or center-crop to ``target_shape``."""
    lo, hi = bbox
    if any(a < 0 or b >= n or a > b for a, b, n in zip(lo, hi, vol.shape)):
        raise ValueError(f"bbox {bbox} outside volume of shape {vol.shape}")
    data, frag = crop_pad_array(vol.data, bbox, tuple(target_shape))
    return Volume(data, vol.geometry.with_shape(data.shape[1:])), frag


def invert_crop_pad(arr: np.ndarray, meta: CaseMeta, fill=0) -> np.ndarray:
    """Undo :func:`crop_pad_array`: model-space array -> resampled-grid array."""
    if tuple(arr.shape[-3:]) != meta.model_shape:
        raise ValueError(f"array shape {arr.shape[-3:]} does not match meta model shape {meta.model_shape}")
    lead_shape = arr.shape[:-3]
    lead = (slice(None),) * len(lead_shape)
    inner = arr[lead + tuple(
        slice(pb, n - pa) for pb, pa, n in zip(meta.pad_before, meta.pad_after, arr.shape[-3:])
    )]
    out = np.full(lead_shape + tuple(meta.resampled_shape), fill, dtype=arr.dtype)
    start = [lo + cb for lo, cb in zip(meta.bbox_min, meta.crop_before)]
    region = tuple(slice(s, s + n) for s, n in zip(start, inner.shape[-3:]))
    out[lead + region] = inner
    return out


# ---------------------------------------------------------------------------
# whole case
# ---------------------------------------------------------------------------


def stack_case(modalities, label: LabelMap | None = None, cfg: PreprocessConfig | None = None,
               case_id: str = "") -> tuple[Volume, LabelMap | None, CaseMeta]:
    """Preprocess four co-registered modalities ``[FLAIR, T1, T1ce, T2]``.

    Returns the stacked model input (4 modalities plus, by default, a binary
    foreground channel), the label map under the same spatial transforms,
    and the metadata needed to undo them.
    """
    cfg = cfg or PreprocessConfig()
    if len(modalities) != 4:
        raise ValueError(f"expected 4 modalities, got {len(modalities)}")
    geom = modalities[0].geometry
    for v in modalities:
        if v.channels != 1:
            raise ValueError("each modality must be single-channel")
        if v.shape != geom.shape or not np.allclose(v.geometry.spacing, geom.spacing):
            raise AlignmentError("modalities are not co-registered")
    if label is not None and label.geometry.shape != geom.shape:
        raise AlignmentError("label grid does not match the images")

    notes: list[str] = []
    channels, masks = [], []
    for name, v in zip(MODALITIES, modalities):
        clipped = clip_and_cast(v, cfg.intensity_cap)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PreprocessWarning)
            normed = normalize_nonzero(clipped)
        notes += [f"{name}: {w.message}" for w in caught if issubclass(w.category, PreprocessWarning)]
        mask = Volume((clipped.data != 0).astype(np.float32), geom)
        normed = resample(normed, cfg.target_spacing)
        mask = resample(mask, cfg.target_spacing, mode="nearest")
        # cubic overshoot must not leak into background
        channels.append(np.where(mask.data != 0, normed.data, 0.0))
        masks.append(mask)

    bbox = foreground_bbox(masks)
    foreground = np.any(np.concatenate([m.data for m in masks]) != 0, axis=0, keepdims=True)
    stacked = np.concatenate(channels + ([foreground.astype(np.float32)] if cfg.add_foreground_channel else []))
    out, frag = crop_pad_array(stacked, bbox, cfg.target_shape)
    origin = tuple(
        o + (lo + cb - pb) * s
        for o, lo, cb, pb, s in zip(masks[0].geometry.origin, frag["bbox_min"], frag["crop_before"],
                                    frag["pad_before"], cfg.target_spacing)
    )
    model_geom = GridGeometry(cfg.target_shape, cfg.target_spacing, origin)
    image = Volume(out, model_geom)

    out_label = None
    if label is not None:
        lab = resample_labels(label, cfg.target_spacing)
        lab_arr, _ = crop_pad_array(lab.labels, bbox, cfg.target_shape)
        out_label = LabelMap(lab_arr, model_geom)

    meta = CaseMeta(
        case_id=case_id,
        original_shape=geom.shape,
        original_spacing=geom.spacing,
        original_origin=geom.origin,
        target_spacing=cfg.target_spacing,
        resampled_shape=masks[0].shape,
        warnings=notes,
        **frag,
    )
    return image, out_label, meta
