import gzip
import struct

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from emednext.volume import (
    GridGeometry,
    LabelMap,
    NiftiFormatError,
    NiftiUnsupportedError,
    ProbMaps,
    Volume,
    read_labels,
    read_nifti,
    write_nifti,
)


def test_geometry_rejects_bad_spacing():
    with pytest.raises(ValueError):
        GridGeometry((4, 4, 4), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        GridGeometry((4, 4, 4), (1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        GridGeometry((0, 4, 4))


def test_volume_rejects_nonfinite():
    data = np.zeros((4, 4, 4), np.float32)
    data[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        Volume(data, GridGeometry((4, 4, 4)))


def test_labelmap_range():
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2, 2), 4), GridGeometry((2, 2, 2)))


def test_roundtrip_identity(tmp_path, rng):
    geom = GridGeometry((5, 6, 7), (0.9, 1.1, 2.0), (3.0, -4.0, 5.5))
    vol = Volume(rng.standard_normal((2, 5, 6, 7)).astype(np.float32), geom)
    path = tmp_path / "v.nii"
    write_nifti(vol, path)
    back = read_nifti(path)
    assert np.array_equal(back.data, vol.data)
    assert back.geometry.shape == geom.shape
    assert np.allclose(back.geometry.spacing, geom.spacing)
    assert np.allclose(back.geometry.origin, geom.origin)


def test_gzip_transparent(tmp_path, rng):
    vol = Volume(rng.random((4, 5, 6)).astype(np.float32), GridGeometry((4, 5, 6), (1.0, 2.0, 3.0)))
    write_nifti(vol, tmp_path / "a.nii")
    (tmp_path / "b.nii.gz").write_bytes(gzip.compress((tmp_path / "a.nii").read_bytes()))
    a, b = read_nifti(tmp_path / "a.nii"), read_nifti(tmp_path / "b.nii.gz")
    assert np.array_equal(a.data, b.data)
    assert a.geometry == b.geometry


def test_zero_volume_size_and_dims(tmp_path):
    write_nifti(Volume(np.zeros((4, 4, 4), np.float32), GridGeometry((4, 4, 4))), tmp_path / "z.nii")
    raw = (tmp_path / "z.nii").read_bytes()
    assert len(raw) == 352 + 4 * 64
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 4, 4, 4)
    assert raw[344:348] == b"n+1\x00"


def test_gz_output_deterministic(tmp_path):
    vol = Volume(np.arange(64, dtype=np.float32).reshape(4, 4, 4), GridGeometry((4, 4, 4)))
    write_nifti(vol, tmp_path / "a.nii.gz")
    write_nifti(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_label_integer_exactness(tmp_path, rng):
    labels = rng.integers(0, 4, size=(6, 5, 4)).astype(np.int16)
    write_nifti(LabelMap(labels, GridGeometry((6, 5, 4))), tmp_path / "l.nii.gz")
    raw = gzip.decompress((tmp_path / "l.nii.gz").read_bytes())
    assert struct.unpack_from("<h", raw, 70)[0] == 4  # int16
    back = read_labels(tmp_path / "l.nii.gz")
    assert back.labels.dtype == np.int16
    assert np.array_equal(back.labels, labels)


def test_probmaps_written_as_three_channels(tmp_path, rng):
    geom = GridGeometry((3, 3, 3))
    probs = ProbMaps.from_array(rng.random((3, 3, 3, 3)), geom)
    write_nifti(probs, tmp_path / "p.nii.gz")
    back = read_nifti(tmp_path / "p.nii.gz")
    assert back.channels == 3
    assert np.array_equal(back.data, probs.stack())


def test_third_party_reader_sees_spacing_and_data(tmp_path, rng):
    data = rng.standard_normal((4, 5, 6)).astype(np.float32)
    write_nifti(Volume(data, GridGeometry((4, 5, 6), (0.9, 0.9, 1.2))), tmp_path / "s.nii.gz")
    img = nib.load(tmp_path / "s.nii.gz")
    assert np.allclose(img.header.get_zooms()[:3], (0.9, 0.9, 1.2))
    assert img.header["sizeof_hdr"] == 348
    assert np.array_equal(np.asarray(img.dataobj), data)


def test_reads_third_party_file(tmp_path, rng):
    data = rng.integers(-100, 100, size=(7, 6, 5)).astype(np.int16)
    img = nib.Nifti1Image(data, np.diag([1.0, 1.0, 1.0, 1.0]))
    img.header.set_zooms((1.0, 1.0, 1.0))
    nib.save(img, tmp_path / "ref.nii")
    vol = read_nifti(tmp_path / "ref.nii")
    assert vol.geometry.spacing == (1.0, 1.0, 1.0)
    assert np.array_equal(vol.data[0], data.astype(np.float32))

    # header fields of the reference file and of our rewrite agree byte-wise
    write_nifti(vol, tmp_path / "ours.nii")
    ref = (tmp_path / "ref.nii").read_bytes()
    ours = (tmp_path / "ours.nii").read_bytes()
    assert ref[40:56] == ours[40:56]  # dim
    assert ref[80:92] == ours[80:92]  # pixdim[1..3]
    assert ours[344:348] == ref[344:348]


def test_reads_scaled_and_big_endian(tmp_path, rng):
    data = rng.integers(0, 50, size=(3, 4, 5)).astype(">i2")
    img = nib.Nifti1Image(data, np.eye(4))
    img.header.set_data_dtype(">i2")
    img.header["scl_slope"] = 2.0
    img.header["scl_inter"] = 1.0
    nib.save(img, tmp_path / "be.nii")
    vol = read_nifti(tmp_path / "be.nii")
    assert np.array_equal(vol.data[0], data.astype(np.float32) * 2 + 1)


def test_bad_magic(tmp_path):
    write_nifti(Volume(np.zeros((2, 2, 2), np.float32), GridGeometry((2, 2, 2))), tmp_path / "m.nii")
    raw = bytearray((tmp_path / "m.nii").read_bytes())
    raw[344:348] = b"xxxx"
    (tmp_path / "m.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError):
        read_nifti(tmp_path / "m.nii")


def test_dim_above_four_unsupported(tmp_path):
    img = nib.Nifti1Image(np.zeros((2, 2, 2, 1, 2), np.float32), np.eye(4))
    nib.save(img, tmp_path / "five.nii")
    with pytest.raises(NiftiUnsupportedError):
        read_nifti(tmp_path / "five.nii")


def test_unsupported_dtype(tmp_path):
    img = nib.Nifti1Image(np.zeros((2, 2, 2), np.complex64), np.eye(4))
    nib.save(img, tmp_path / "c.nii")
    with pytest.raises(NiftiUnsupportedError):
        read_nifti(tmp_path / "c.nii")


def test_missing_parent_directory(tmp_path):
    vol = Volume(np.zeros((2, 2, 2), np.float32), GridGeometry((2, 2, 2)))
    with pytest.raises(OSError):
        write_nifti(vol, tmp_path / "nope" / "v.nii")


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.1, 5.0)] * 3))
def test_roundtrip_property(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("rt") / "v.nii.gz"
    vol = Volume(data, GridGeometry(data.shape, spacing))
    write_nifti(vol, path)
    back = read_nifti(path)
    assert np.array_equal(back.data, vol.data)
    assert np.allclose(back.geometry.spacing, np.float32(spacing))
