import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgdm.volgrid import (
    BoundingBox,
    EmptyForegroundError,
    GridError,
    GridFormatError,
    LabelGrid,
    VolumeGrid,
    box_from_mask,
    crop_resize,
    paste_back,
    read_grid,
    resample,
    volume_io,
    write_grid,
)


def _byte_level_checksum(stem):
    """Independent reader: parse header with json, unpack payload with struct."""
    header = json.loads(open(f"{stem}.vgf.json").read())
    raw = open(f"{stem}.vgf.raw", "rb").read()
    n = int(np.prod(header["dims"]))
    if header["dtype"] == "float32":
        values = struct.unpack(f"<{n}f", raw)
        canon = struct.pack(f"<{n}f", *values)
    else:
        values = struct.unpack(f"{n}B", raw)
        canon = bytes(values)
    return hashlib.sha256(canon).hexdigest()


def test_round_trip_zeros(tmp_path):
    grid = VolumeGrid(np.zeros((2, 2, 2)), spacing=(0.5, 1.25, 2.0), origin=(1.0, -2.0, 3.5))
    volume_io(tmp_path / "z", grid, mode="write")
    back = volume_io(tmp_path / "z", mode="read")
    assert isinstance(back, VolumeGrid)
    np.testing.assert_array_equal(back.data, grid.data)
    assert back.spacing == grid.spacing and back.origin == grid.origin


def test_round_trip_seeded_checksum(tmp_path):
    rng = np.random.default_rng(1337)
    grid = VolumeGrid(rng.normal(size=(5, 6, 7)) * 1000, spacing=(0.7, 0.7, 1.1))
    write_grid(tmp_path / "r", grid)
    back = read_grid(tmp_path / "r")
    expected = hashlib.sha256(grid.data.astype("<f4").tobytes()).hexdigest()
    assert _byte_level_checksum(tmp_path / "r") == expected
    assert hashlib.sha256(back.data.astype("<f4").tobytes()).hexdigest() == expected


def test_label_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    lab = LabelGrid(rng.integers(0, 21, size=(4, 3, 5)), num_classes=21)
    write_grid(tmp_path / "lab", lab)
    back = read_grid(tmp_path / "lab.vgf.json")
    assert isinstance(back, LabelGrid) and back.num_classes == 21
    np.testing.assert_array_equal(back.data, lab.data)
    assert _byte_level_checksum(tmp_path / "lab") == hashlib.sha256(lab.data.tobytes()).hexdigest()


def test_payload_too_short(tmp_path):
    write_grid(tmp_path / "v", VolumeGrid(np.ones((2, 2, 2))))
    raw = tmp_path / "v.vgf.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(GridFormatError, match="size mismatch"):
        read_grid(tmp_path / "v")


def test_missing_file(tmp_path):
    with pytest.raises(GridFormatError):
        read_grid(tmp_path / "nope")


def test_label_value_exceeds_k(tmp_path):
    write_grid(tmp_path / "l", LabelGrid(np.full((2, 2, 2), 3), num_classes=4))
    header = json.loads((tmp_path / "l.vgf.json").read_text())
    header["num_classes"] = 2
    (tmp_path / "l.vgf.json").write_text(json.dumps(header))
    with pytest.raises(GridFormatError, match="exceeds"):
        read_grid(tmp_path / "l")
    with pytest.raises(GridError):
        LabelGrid(np.full((2, 2, 2), 5), num_classes=3)


def test_invariants_rejected():
    with pytest.raises(GridError):
        VolumeGrid(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(GridError):
        VolumeGrid(np.array([[[np.nan]]]))
    with pytest.raises(GridError):
        BoundingBox((0, 0, 0), (1, 0, 1))


# -- resampling ---------------------------------------------------------------


@pytest.mark.parametrize("shape", [(3, 5, 7), (8, 8, 8), (1, 2, 9)])
def test_resample_constant(shape):
    out = resample(VolumeGrid(np.full((4, 6, 5), 5.0)), shape)
    assert out.shape == shape
    np.testing.assert_allclose(out.data, 5.0, atol=1e-6)


def test_resample_identity():
    data = np.random.default_rng(0).normal(size=(4, 4, 4))
    out = resample(VolumeGrid(data), (4, 4, 4))
    np.testing.assert_array_equal(out.data, data.astype(np.float32))
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_ramp_closed_form():
    z, y, x = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
    ramp = lambda z, y, x: 0.5 * z - 0.25 * y + 0.125 * x + 1.0
    out = resample(VolumeGrid(ramp(z, y, x)), (4, 4, 4))
    # half-pixel alignment: output i samples input coordinate (i + 0.5) * 2 - 0.5
    c = (np.arange(4) + 0.5) * 2 - 0.5
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    assert np.abs(out.data - ramp(zz, yy, xx)).max() < 1e-5
    assert out.spacing == (2.0, 2.0, 2.0)


def test_resample_label_requires_nearest():
    lab = LabelGrid(np.zeros((2, 2, 2)), 2)
    with pytest.raises(GridError):
        resample(lab, (4, 4, 4), "trilinear")


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(*[st.integers(1, 9)] * 3),
    st.tuples(*[st.integers(1, 9)] * 3),
    st.integers(0, 2**31 - 1),
)
def test_trilinear_within_input_range(src, dst, seed):
    data = np.random.default_rng(seed).normal(size=src)
    out = resample(VolumeGrid(data), dst).data
    assert out.min() >= data.astype(np.float32).min() - 1e-5
    assert out.max() <= data.astype(np.float32).max() + 1e-5


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(*[st.integers(1, 8)] * 3),
    st.tuples(*[st.integers(1, 8)] * 3),
    st.integers(0, 2**31 - 1),
)
def test_nearest_round_trip_adds_no_classes(s1, s2, seed):
    rng = np.random.default_rng(seed)
    lab = LabelGrid(rng.choice([0, 3, 7], size=s1), num_classes=8)
    back = resample(resample(lab, s2, "nearest"), s1, "nearest")
    assert back.shape == s1
    assert set(np.unique(back.data)) <= set(np.unique(lab.data))


# -- boxes ----------------------------------------------------------------------


def test_box_single_voxel():
    m = np.zeros((8, 8, 8), np.uint8)
    m[3, 3, 3] = 1
    box = box_from_mask(m, 0.0)
    assert box.lo == (3, 3, 3) and box.hi == (4, 4, 4)


def test_box_full_mask_clamped():
    box = box_from_mask(np.ones((5, 6, 7)), 0.1)
    assert box.lo == (0, 0, 0) and box.hi == (5, 6, 7)


def test_box_l_shape_brute_force():
    coords = [(2, 1, 1), (2, 2, 1), (2, 3, 1), (2, 3, 2), (2, 3, 3), (4, 3, 3)]
    m = np.zeros((7, 7, 7), np.uint8)
    for c in coords:
        m[c] = 1
    lo = tuple(min(c[a] for c in coords) for a in range(3))
    hi = tuple(max(c[a] for c in coords) + 1 for a in range(3))
    box = box_from_mask(LabelGrid(m, 2), 0.0)
    assert (box.lo, box.hi) == (lo, hi)


def test_box_margin_grows_and_empty_raises():
    m = np.zeros((20, 20, 20), np.uint8)
    m[5:15, 8:12, 9:10] = 1
    box = box_from_mask(m, 0.1)
    assert box.lo == (4, 7, 8) and box.hi == (16, 13, 11)
    with pytest.raises(EmptyForegroundError):
        box_from_mask(np.zeros((3, 3, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_box_margin0_is_minimal(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((6, 7, 5)) > 0.93).astype(np.uint8)
    m[rng.integers(6), rng.integers(7), rng.integers(5)] = 1
    box = box_from_mask(m)
    inside = np.zeros_like(m)
    inside[box.slices] = 1
    assert m[inside == 0].sum() == 0
    # every face of the box touches foreground
    for axis in range(3):
        for idx in (box.lo[axis], box.hi[axis] - 1):
            assert np.take(m[box.slices], idx - box.lo[axis], axis=axis).any()


# -- crop / paste -----------------------------------------------------------------


def test_crop_paste_identity_path():
    rng = np.random.default_rng(5)
    lab = LabelGrid(rng.integers(0, 21, (12, 10, 14)), 21)
    box = BoundingBox((2, 3, 1), (9, 8, 13))
    crop = crop_resize(lab, box, box.size)
    pasted = paste_back(crop, box, lab.shape)
    np.testing.assert_array_equal(pasted.data[box.slices], lab.data[box.slices])
    outside = np.ones(lab.shape, bool)
    outside[box.slices] = False
    assert not pasted.data[outside].any()


def test_crop_volume_geometry():
    vol = VolumeGrid(np.arange(4 * 6 * 8, dtype=float).reshape(4, 6, 8), spacing=(1, 2, 3), origin=(10, 0, 0))
    box = BoundingBox((1, 2, 2), (3, 6, 6))
    out = crop_resize(vol, box, (4, 8, 8))
    assert out.shape == (4, 8, 8)
    assert out.spacing == (0.5, 1.0, 1.5)
    assert out.origin == (11.0, 4.0, 6.0)
    with pytest.raises(GridError):
        crop_resize(vol, BoundingBox((0, 0, 0), (5, 1, 1)), (2, 2, 2))


def test_crop_upsample_round_trip_bounded_by_surface():
    z, y, x = np.mgrid[:40, :40, :40]
    lab = np.zeros((40, 40, 40), np.uint8)
    lab[(z - 20) ** 2 + (y - 19) ** 2 + (x - 21) ** 2 <= 36] = 1
    lab[(z - 14) ** 2 + (y - 24) ** 2 <= 9] = 2
    grid = LabelGrid(lab, 3)
    box = BoundingBox((12, 12, 12), (28, 28, 28))
    crop = crop_resize(grid, box, (32, 32, 32))
    back = paste_back(crop, box, grid.shape)
    gt_crop = lab[box.slices]
    from scipy import ndimage

    for k in (1, 2):
        m = gt_crop == k
        surface = int((m & ~ndimage.binary_erosion(m, border_value=0)).sum())
        change = abs(int((back.data == k).sum()) - int(m.sum()))
        assert change <= surface
