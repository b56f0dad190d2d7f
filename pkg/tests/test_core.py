import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctquant.core import (
    DEFAULT_KERNEL_WHITELIST,
    LabelMask,
    PipelineConfig,
    RoiBox,
    RoiShape,
    SeriesMeta,
    Volume,
    check_pairing,
    in_plane_axes,
    world_from_voxel,
)
from ctquant.errors import GeometryMismatch, ValidationError


@pytest.mark.parametrize(
    "origin, spacing, index, expected",
    [
        ((0, 0, 0), (1, 1, 1), (2, 3, 4), (2, 3, 4)),
        ((0, 0, 0), (0.5, 0.5, 2), (2, 3, 4), (1, 1.5, 8)),
        ((10, 0, 0), (1, 1, 1), (0, 0, 0), (10, 0, 0)),
    ],
)
def test_world_from_voxel_examples(origin, spacing, index, expected):
    vol = Volume(np.zeros((5, 5, 5)), spacing, origin=origin)
    assert world_from_voxel(vol, index) == pytest.approx(expected, abs=1e-12)


def test_world_from_voxel_out_of_bounds():
    vol = Volume(np.zeros((3, 3, 3)), (1, 1, 1))
    with pytest.raises(IndexError):
        world_from_voxel(vol, (3, 0, 0))
    with pytest.raises(IndexError):
        world_from_voxel(vol, (0, -1, 0))


def _rotated_orientation(a, b):
    # rotation about z by a, then about x by b keeps the frame orthonormal
    ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cb, -sb], [0, sb, cb]])
    r = rx @ rz
    return tuple(r[:, 0]) + tuple(r[:, 1])


@given(
    a=st.tuples(*[st.integers(0, 4)] * 3),
    b=st.tuples(*[st.integers(0, 4)] * 3),
    ang=st.floats(0, 2 * math.pi),
    tilt=st.floats(0, 1.0),
    spacing=st.tuples(*[st.floats(0.1, 5.0)] * 3),
    origin=st.tuples(*[st.floats(-500, 500)] * 3),
)
def test_world_from_voxel_is_affine(a, b, ang, tilt, spacing, origin):
    vol = Volume(np.zeros((9, 9, 9)), spacing, _rotated_orientation(ang, tilt), origin)
    f = lambda idx: np.array(world_from_voxel(vol, idx))
    ab = tuple(x + y for x, y in zip(a, b))
    assert np.allclose(f(a) + f(b) - f((0, 0, 0)), f(ab), atol=1e-9)


def test_volume_invariants():
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValidationError):
        Volume(np.array([[[np.nan]]]), (1, 1, 1))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1, 1, 1), orientation=(1, 0, 0, 0.1, 1, 0))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1, 1, 1), orientation=(1, 0, 0, 1, 0, 0))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2)), (1, 1, 1))


def test_volume_is_immutable_copy():
    src = np.zeros((2, 2, 2))
    vol = Volume(src, (1, 1, 1))
    src[0, 0, 0] = 5
    assert vol.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1


def test_pairing_rejects_dims_and_spacing_mismatch():
    vol = Volume(np.zeros((4, 4, 4)), (1, 1, 2))
    check_pairing(vol, LabelMask(np.zeros((4, 4, 4), np.uint8)))
    with pytest.raises(GeometryMismatch):
        check_pairing(vol, LabelMask(np.zeros((4, 4, 3), np.uint8)))
    with pytest.raises(GeometryMismatch):
        check_pairing(vol, LabelMask(np.zeros((4, 4, 4), np.uint8), spacing=(1, 1, 1)))


def test_label_mask_invariants():
    with pytest.raises(ValidationError):
        LabelMask(np.zeros((2, 2, 2), np.uint8), {0: "bg"})
    with pytest.raises(ValidationError):
        LabelMask(np.full((2, 2, 2), -1))
    m = LabelMask(np.array([[[0, 1], [2, 2]]], dtype=np.uint8), {1: "L1", 2: "L2"})
    assert m.binary("L2").sum() == 2
    assert not m.binary("L5").any()
    assert m.label_of("L1") == 1


def test_series_meta_absence_and_roundtrip():
    meta = SeriesMeta(kvp=120, image_type_flags={"original", "primary"}, subgroup_keys={"sex": "F"})
    assert meta.kernel is None and meta.slice_thickness_mm is None
    assert meta.image_type_flags == {"ORIGINAL", "PRIMARY"}
    assert SeriesMeta.from_dict(meta.to_dict()) == meta
    with pytest.raises(ValidationError):
        SeriesMeta(kvp=0)
    with pytest.raises(ValidationError):
        SeriesMeta(slice_thickness_mm=-1)


def test_roi_box_invariants_and_inscribed_ellipsoid():
    with pytest.raises(ValidationError):
        RoiBox((0, 0, 0), (0, 1, 1))
    with pytest.raises(ValidationError):
        RoiBox((0, 0, 0), (1, 1, 1), clipped_fraction=1.5)
    roi = RoiBox((0, 0, 0), (5, 5, 5), RoiShape.ELLIPSOID)
    local = roi.local_mask()
    assert local[2, 2, 2] and not local[0, 0, 0]
    assert roi.mask((6, 6, 6)).sum() == local.sum()


def test_pipeline_config_defaults_and_invariants():
    cfg = PipelineConfig()
    assert (cfg.bmd_hu_threshold, cfg.air_qc_lo, cfg.air_qc_hi) == (300, -1050, -950)
    assert (cfg.vat_ref_hu, cfg.air_ref_hu) == (-95, -1000)
    assert cfg.axial_tolerance == 0.999
    assert cfg.max_slice_thickness_mm == 5.0 and cfg.required_kvp == 120
    assert cfg.roi_fraction == 0.4 and cfg.score_conversion is None
    assert cfg.kernel_whitelist == DEFAULT_KERNEL_WHITELIST and len(DEFAULT_KERNEL_WHITELIST) == 16
    with pytest.raises(ValueError):
        PipelineConfig(vat_ref_hu=-1000, air_ref_hu=-95)
    with pytest.raises(ValueError):
        PipelineConfig(roi_fraction=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(air_qc_lo=-900, air_qc_hi=-950)


def test_in_plane_axes_lps_and_ras():
    vol = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
    assert in_plane_axes(vol, "LPS") == (1, -1, 0)
    assert in_plane_axes(vol, "RAS") == (1, 1, 0)
    swapped = Volume(np.zeros((2, 2, 2)), (1, 1, 1), orientation=(0, 1, 0, 1, 0, 0))
    assert in_plane_axes(swapped, "LPS") == (0, -1, 1)
