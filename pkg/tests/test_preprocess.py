import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from emednext.inference import restore_to_original_space
from emednext.preprocess import (
    AlignmentError,
    CaseMeta,
    EmptyForegroundError,
    PreprocessConfig,
    PreprocessWarning,
    clip_and_cast,
    crop_pad_centered,
    foreground_bbox,
    normalize_nonzero,
    resample,
    resample_labels,
    resampled_shape,
    stack_case,
)
from emednext.synthetic import nested_phantom
from emednext.volume import GridGeometry, LabelMap, Volume


def vol(arr, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr, dtype=np.float32)
    return Volume(arr, GridGeometry(arr.shape, spacing))


def test_clip_examples():
    out = clip_and_cast(vol(np.array([-5, 40000, 1200, 32767, 32766.7]).reshape(5, 1, 1)), 32767)
    assert out.data.ravel().tolist() == [0, 0, 1200, 0, 32766]


def test_normalize_two_values():
    out = normalize_nonzero(vol(np.array([0, 2, 4, 0]).reshape(4, 1, 1)))
    assert out.data.ravel().tolist() == [0, -1, 1, 0]


def test_normalize_all_zero_warns():
    with pytest.warns(PreprocessWarning):
        out = normalize_nonzero(vol(np.zeros((3, 3, 3))))
    assert not out.data.any()


def test_normalize_constant_warns_and_centres():
    with pytest.warns(PreprocessWarning):
        out = normalize_nonzero(vol(np.array([0, 5, 5]).reshape(3, 1, 1)))
    assert out.data.ravel().tolist() == [0, 0, 0]


@given(hnp.arrays(np.float64, (6, 5, 4), elements=st.floats(0, 1000)))
def test_normalize_statistics(arr):
    arr = np.trunc(arr)
    mask = arr != 0
    v = vol(arr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PreprocessWarning)
        out = normalize_nonzero(v).data[0].astype(np.float64)
    assert np.all(out[~mask] == 0)
    vals = out[mask]
    if mask.sum() >= 2 and np.std(arr[mask]) > 0:
        assert abs(vals.mean()) < 1e-5
        assert abs(vals.std() - 1) < 1e-5


def test_resample_identity_is_bitwise(rng):
    v = vol(rng.standard_normal((5, 6, 7)), (1.2, 1.0, 0.8))
    out = resample(v, (1.2, 1.0, 0.8))
    assert np.array_equal(out.data, v.data)
    assert out.geometry == v.geometry


def test_resample_linear_ramp_downsample():
    n = 12
    ramp = np.broadcast_to(np.arange(n, dtype=np.float64)[:, None, None], (n, 3, 3))
    out = resample(vol(ramp), (2.0, 1.0, 1.0))
    assert out.shape == (6, 3, 3)
    # output voxel j is centred on input coordinate 2j + 0.5
    expected = 2 * np.arange(6) + 0.5
    assert np.allclose(out.data[0, :, 1, 1], expected, atol=1e-4)


def test_resample_linear_ramp_upsample_3d():
    x, y, z = np.meshgrid(np.arange(8), np.arange(6), np.arange(5), indexing="ij")
    f = 1.5 * x - 0.5 * y + 2 * z
    out = resample(vol(f), (0.5, 0.5, 0.5))
    xs, ys, zs = [(np.arange(n) + 0.5) * 0.5 - 0.5 for n in out.shape]
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    assert np.allclose(out.data[0], 1.5 * gx - 0.5 * gy + 2 * gz, atol=1e-4)


def test_resample_shape_rounding():
    assert resampled_shape((155, 10, 10), (1, 1, 1), (0.5, 1, 1)) == (310, 10, 10)
    assert resampled_shape((3, 3, 3), (1, 1, 1), (10, 10, 10)) == (1, 1, 1)


def test_resample_constant_exact():
    out = resample(vol(np.full((7, 5, 4), 3.25)), (0.7, 1.3, 2.0))
    assert np.all(out.data == np.float32(3.25))


def test_resample_rejects_bad_spacing():
    with pytest.raises(ValueError):
        resample(vol(np.zeros((2, 2, 2))), (1.0, 0.0, 1.0))


def test_resample_labels_stay_labels(rng):
    lab = LabelMap(rng.integers(0, 4, (6, 6, 6)), GridGeometry((6, 6, 6)))
    out = resample_labels(lab, (0.5, 0.5, 0.5))
    assert set(np.unique(out.labels)) <= {0, 1, 2, 3}
    # each input voxel becomes a 2x2x2 block under nearest sampling
    assert np.array_equal(out.labels[::2, ::2, ::2], lab.labels)


def test_bbox_single_voxel():
    a = np.zeros((8, 8, 8))
    a[3, 4, 5] = 1
    assert foreground_bbox([vol(a)]) == ((3, 4, 5), (3, 4, 5))


def test_bbox_union_semantics():
    a, b = np.zeros((8, 8, 8)), np.zeros((8, 8, 8))
    b[1, 2, 3] = 1
    b[6, 5, 4] = 1
    assert foreground_bbox([vol(a), vol(b), vol(a), vol(a)]) == ((1, 2, 3), (6, 5, 4))


def test_bbox_empty_raises():
    with pytest.raises(EmptyForegroundError):
        foreground_bbox([vol(np.zeros((3, 3, 3)))])


@given(hnp.arrays(bool, (7, 6, 5), elements=st.booleans()))
def test_bbox_matches_coordinate_scan(mask):
    if not mask.any():
        return
    coords = [(x, y, z) for x in range(7) for y in range(6) for z in range(5) if mask[x, y, z]]
    lo = tuple(min(c[d] for c in coords) for d in range(3))
    hi = tuple(max(c[d] for c in coords) for d in range(3))
    assert foreground_bbox([vol(mask)]) == (lo, hi)


def test_crop_pad_pure_padding():
    v = vol(np.ones((100, 100, 100)))
    out, frag = crop_pad_centered(v, ((0, 0, 0), (99, 99, 99)), (160, 160, 128))
    assert out.shape == (160, 160, 128)
    assert frag["pad_before"] == (30, 30, 14) and frag["pad_after"] == (30, 30, 14)
    assert out.data.sum() == 100**3


def test_crop_pad_high_side_crop():
    a = np.zeros((171, 160, 128), np.float32)
    a[5:165] = 1
    out, frag = crop_pad_centered(vol(a), ((0, 0, 0), (170, 159, 127)), (160, 160, 128))
    assert frag["crop_before"] == (5, 0, 0) and frag["crop_after"] == (6, 0, 0)
    assert np.all(out.data == 1)


def test_crop_pad_odd_pad_goes_high():
    _, frag = crop_pad_centered(vol(np.ones((5, 4, 4))), ((0, 0, 0), (4, 3, 3)), (8, 4, 4))
    assert frag["pad_before"][0] == 1 and frag["pad_after"][0] == 2


def test_casemeta_json_roundtrip(tmp_path):
    meta = CaseMeta("c", (4, 4, 4), (1, 1, 1), (0, 0, 0), (1, 1, 1), (4, 4, 4), (0, 0, 0), (3, 3, 3),
                    (1, 1, 1), (1, 1, 1), (0, 0, 0), (0, 0, 0), ["w"])
    meta.save(tmp_path / "m.json")
    assert CaseMeta.load(tmp_path / "m.json") == meta
    assert meta.model_shape == (6, 6, 6)


def test_stack_case_identical_phantoms():
    base = np.zeros((12, 12, 12))
    base[3:9, 4:8, 2:10] = np.arange(6 * 4 * 8).reshape(6, 4, 8) + 1
    mods = [vol(base)] * 4
    image, _, _ = stack_case(mods, cfg=PreprocessConfig(target_shape=(8, 8, 8)))
    for c in range(1, 4):
        assert np.array_equal(image.data[c], image.data[0])
    assert np.array_equal(image.data[4], (image.data[0] != 0) | (image.data[4] != 0))
    assert image.data[4].sum() == 6 * 4 * 8


def test_stack_case_full_shape_and_label_padding():
    mods, label = nested_phantom(shape=(64, 64, 48), brain_radii=(24, 26, 18), radii=(10, 7, 4))
    image, lab, meta = stack_case(mods, label, case_id="p")
    assert image.data.shape == (5, 160, 160, 128)
    assert np.all(np.isfinite(image.data))
    for k in (1, 2, 3):
        assert (lab.labels == k).sum() == (label.labels == k).sum()
    assert meta.model_shape == (160, 160, 128)


def test_stack_case_rejects_misaligned():
    a, b = vol(np.ones((4, 4, 4))), vol(np.ones((4, 4, 5)))
    with pytest.raises(AlignmentError):
        stack_case([a, a, a, b])


def test_stack_case_records_warnings():
    a = vol(np.ones((4, 4, 4)) * 7)
    z = vol(np.zeros((4, 4, 4)))
    _, _, meta = stack_case([a, a, z, a], cfg=PreprocessConfig(target_shape=(4, 4, 4)))
    assert any(w.startswith("t1ce") for w in meta.warnings)


@pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (0.5, 0.5, 0.5), (1.0, 1.0, 2.0)])
def test_preprocess_restore_roundtrip(spacing):
    mods, label = nested_phantom(shape=(40, 36, 30), spacing=spacing, brain_radii=(14, 13, 11),
                                 radii=(7, 5, 3))
    _, lab, meta = stack_case(mods, label, PreprocessConfig(target_shape=(32, 32, 32)))
    back = restore_to_original_space(lab, meta)
    if spacing == (1.0, 1.0, 1.0):
        assert np.array_equal(back.labels, label.labels)
    else:
        # off-target grids: restoring equals two nearest-neighbour resamplings
        twice = resample_labels(resample_labels(label, (1.0, 1.0, 1.0)), spacing)
        assert np.array_equal(back.labels, twice.labels)
