"""Grid types and a small NIfTI-1 codec.

Arrays are indexed ``[c, x, y, z]``. On disk NIfTI stores x fastest, so a
``(C, X, Y, Z)`` array is transposed to ``(X, Y, Z, C)`` and written in
Fortran order; reading does the reverse.
"""

from __future__ import annotations

import gzip
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (endianness applied at read time)
NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in NIFTI_DTYPES.items()}

# qform_code .. intent_name: bytes 252..344 of the header, kept opaque
_AFFINE_SLICE = slice(252, 344)


class NiftiFormatError(ValueError):
    pass


class NiftiUnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(shape) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry needs three shape, spacing and origin components")
        if any(s < 1 for s in shape):
            raise ValueError(f"shape dims must be >= 1, got {shape}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def with_shape(self, shape) -> GridGeometry:
        return GridGeometry(tuple(shape), self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class Volume:
    """Multi-channel float32 grid of shape ``(C, X, Y, Z)``."""

    data: np.ndarray
    geometry: GridGeometry
    affine_block: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got {data.ndim}D")
        if data.shape[1:] != self.geometry.shape:
            raise ValueError(f"data shape {data.shape[1:]} != geometry shape {self.geometry.shape}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.geometry.shape

    def channel(self, i: int) -> Volume:
        return Volume(self.data[i : i + 1], self.geometry)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Fused segmentation with values in {0, 1, 2, 3}."""

    labels: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.geometry.shape:
            raise ValueError(f"label shape {labels.shape} != geometry shape {self.geometry.shape}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValueError("label map must hold integers")
        labels = np.ascontiguousarray(labels, dtype=np.int16)
        if labels.size and (labels.min() < 0 or labels.max() > 3):
            raise ValueError("label values must lie in {0, 1, 2, 3}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True, eq=False)
class ProbMaps:
    """Soft predictions for the TC, WT and ET regions (channel order TC, WT, ET)."""

    tc: np.ndarray
    wt: np.ndarray
    et: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        for name in ("tc", "wt", "et"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != self.geometry.shape:
                raise ValueError(f"{name} shape {arr.shape} != geometry shape {self.geometry.shape}")
            if not np.all(np.isfinite(arr)) or (arr.size and (arr.min() < 0 or arr.max() > 1)):
                raise ValueError(f"{name} probabilities must lie in [0, 1]")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_array(cls, arr: np.ndarray, geometry: GridGeometry) -> ProbMaps:
        arr = np.asarray(arr)
        if arr.shape[0] != 3:
            raise ValueError("probability array needs 3 channels (TC, WT, ET)")
        return cls(arr[0], arr[1], arr[2], geometry)

    def stack(self) -> np.ndarray:
        return np.stack([self.tc, self.wt, self.et])

    def to_volume(self) -> Volume:
        return Volume(self.stack(), self.geometry)


# ---------------------------------------------------------------------------
# NIfTI-1 I/O
# ---------------------------------------------------------------------------


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes):
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("file shorter than a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"bad magic {magic!r}; only single-file NIfTI-1 is supported")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, _bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", raw[108:120])
    qform_code, sform_code = struct.unpack(endian + "2h", raw[252:256])
    qoffset = struct.unpack(endian + "3f", raw[268:280])
    srow = np.array(struct.unpack(endian + "12f", raw[280:328])).reshape(3, 4)
    return {
        "endian": endian,
        "dim": dim,
        "datatype": datatype,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "qoffset": qoffset,
        "srow": srow,
    }


def _decode(path: str | os.PathLike):
    raw = _open_bytes(Path(path))
    hdr = _parse_header(raw)
    ndim = hdr["dim"][0]
    if ndim < 1 or ndim > 4:
        raise NiftiUnsupportedError(f"only 1-4 dimensional images are supported, got {ndim}")
    dims = [max(int(d), 1) for d in hdr["dim"][1 : ndim + 1]] + [1] * (4 - ndim)
    if hdr["datatype"] not in NIFTI_DTYPES:
        raise NiftiUnsupportedError(f"unsupported NIfTI datatype code {hdr['datatype']}")
    dtype = np.dtype(NIFTI_DTYPES[hdr["datatype"]]).newbyteorder(hdr["endian"])
    count = int(np.prod(dims))
    start = hdr["vox_offset"]
    if len(raw) < start + count * dtype.itemsize:
        raise NiftiFormatError("truncated image data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    arr = flat.reshape(dims, order="F")  # (X, Y, Z, T)
    spacing = tuple(abs(float(p)) if p else 1.0 for p in hdr["pixdim"][1:4])
    if hdr["qform_code"] > 0:
        origin = tuple(float(v) for v in hdr["qoffset"])
    elif hdr["sform_code"] > 0:
        origin = tuple(float(v) for v in hdr["srow"][:, 3])
    else:
        origin = (0.0, 0.0, 0.0)
    geom = GridGeometry(tuple(dims[:3]), spacing, origin)
    return arr, hdr, geom, raw[_AFFINE_SLICE]


def read_nifti(path: str | os.PathLike) -> Volume:
    """Read a ``.nii`` / ``.nii.gz`` file as a float32 :class:`Volume`.

    The fourth dimension, if present, becomes the channel axis. Scaling
    (``scl_slope``/``scl_inter``) is applied when set.
    """
    arr, hdr, geom, affine_block = _decode(path)
    data = arr.astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data * slope + inter
    data = np.moveaxis(data, 3, 0).astype(np.float32)
    return Volume(data, geom, affine_block=affine_block)


def read_labels(path: str | os.PathLike) -> LabelMap:
    arr, _hdr, geom, _ = _decode(path)
    if arr.shape[3] != 1:
        raise NiftiUnsupportedError("label maps must be single-channel")
    return LabelMap(np.asarray(arr[..., 0]).astype(np.int16), geom)


def _default_affine_block(geom: GridGeometry) -> bytes:
    sx, sy, sz = geom.spacing
    ox, oy, oz = geom.origin
    block = struct.pack("<2h", 1, 1)  # qform_code, sform_code: scanner
    block += struct.pack("<3f", 0.0, 0.0, 0.0)  # quatern b, c, d
    block += struct.pack("<3f", ox, oy, oz)
    block += struct.pack("<4f", sx, 0.0, 0.0, ox)
    block += struct.pack("<4f", 0.0, sy, 0.0, oy)
    block += struct.pack("<4f", 0.0, 0.0, sz, oz)
    block += b"\x00" * 16  # intent_name
    return block


def encode_nifti(data: np.ndarray, geom: GridGeometry, affine_block: bytes | None = None) -> bytes:
    """Serialize a ``(C, X, Y, Z)`` array to uncompressed NIfTI-1 bytes."""
    data = np.asarray(data)
    if data.dtype not in _CODE_FOR_DTYPE:
        raise NiftiUnsupportedError(f"cannot store dtype {data.dtype}")
    channels = data.shape[0]
    ndim = 4 if channels > 1 else 3
    dim = [ndim, *geom.shape, channels if channels > 1 else 1, 1, 1, 1]
    dtype = data.dtype.newbyteorder("<")

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 39, 0)  # dim_info
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, _CODE_FOR_DTYPE[data.dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *geom.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2 | 8  # xyzt_units: mm, seconds
    hdr[_AFFINE_SLICE] = affine_block if affine_block is not None else _default_affine_block(geom)
    hdr[344:348] = b"n+1\x00"

    payload = np.moveaxis(data, 0, 3).astype(dtype, copy=False)
    return bytes(hdr) + b"\x00" * 4 + payload.tobytes(order="F")


def _write_bytes(blob: bytes, path: Path) -> None:
    if path.name.endswith(".gz"):
        buf = io.BytesIO()
        # mtime=0 and no filename keep the output byte-identical across runs
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0, compresslevel=1) as gz:
            gz.write(blob)
        blob = buf.getvalue()
    path.write_bytes(blob)


def write_nifti(vol: Volume | LabelMap | ProbMaps, path: str | os.PathLike) -> None:
    """Write a volume (float32), label map (int16) or probability maps (3-channel float32)."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    affine_block = None
    if isinstance(vol, LabelMap):
        data = vol.labels[None].astype(np.int16)
    elif isinstance(vol, ProbMaps):
        data = vol.stack().astype(np.float32)
    else:
        data = vol.data.astype(np.float32)
        affine_block = vol.affine_block
    _write_bytes(encode_nifti(data, vol.geometry, affine_block), path)
