import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from ctquant.aaq import (
    DiameterReport,
    crop_to_lumbar,
    emit_profile,
    max_minor_diameter,
    run_aaq,
    slice_ellipse,
    write_profile_csv,
)
from ctquant.core import LabelMask, PipelineConfig, Volume
from ctquant.errors import EmptySegmentation, SpineIncomplete
from ctquant.phantom import Bulge, CylinderSpec, make_cylinder
from helpers import brute_moments, constant_volume, disk, spine_mask

DIMS = (128, 128, 64)


def _tol(d, voxel=1.0):
    return max(voxel, 0.02 * d)


# -- crop_to_lumbar ---------------------------------------------------------


def test_crop_examples():
    vol = constant_volume((5, 5, 70), spacing=(1, 1, 2))
    spine = spine_mask((5, 5, 70), 10, 50, spacing=(1, 1, 2))
    cropped, rng = crop_to_lumbar(vol, spine, 0)
    assert rng == (10, 50) and cropped.dims == (5, 5, 41)
    assert cropped.origin == pytest.approx((0, 0, 20))
    _, rng = crop_to_lumbar(vol, spine, 10)
    assert rng == (5, 55)


def test_crop_clips_to_volume():
    vol = constant_volume((5, 5, 20))
    spine = spine_mask((5, 5, 20), 2, 18)
    _, rng = crop_to_lumbar(vol, spine, 5)
    assert rng == (0, 19)


def test_crop_missing_level():
    vol = constant_volume((5, 5, 60))
    with pytest.raises(SpineIncomplete):
        crop_to_lumbar(vol, spine_mask((5, 5, 60), 10, 50, missing=("L3",)), 0)


# -- slice_ellipse ----------------------------------------------------------


def test_disk_radius_10():
    m = disk(41, 10)
    fit = slice_ellipse(m, (1, 1))
    assert fit.minor_mm == pytest.approx(20, rel=0.02)
    assert fit.major_mm == pytest.approx(20, rel=0.02)
    major, minor = brute_moments(m, (1, 1))
    assert fit.major_mm == pytest.approx(major, rel=1e-9)
    assert fit.minor_mm == pytest.approx(minor, rel=1e-9)


def test_axis_aligned_ellipse():
    i, j = np.ogrid[:61, :41]
    m = ((i - 30) / 20.0) ** 2 + ((j - 20) / 10.0) ** 2 <= 1
    fit = slice_ellipse(m, (1, 1))
    assert fit.major_mm == pytest.approx(40, rel=0.02)
    assert fit.minor_mm == pytest.approx(20, rel=0.02)
    assert abs(math.sin(fit.angle_rad)) < 1e-9  # major axis along i
    major, minor = brute_moments(m, (1, 1))
    assert (fit.major_mm, fit.minor_mm) == pytest.approx((major, minor), rel=1e-9)


def test_anisotropic_spacing_in_physical_units():
    # a 20 mm circle sampled at 0.5 x 1.0 mm pixels
    i, j = np.ogrid[:61, :31]
    m = ((i - 30) * 0.5) ** 2 + ((j - 15) * 1.0) ** 2 <= 10 ** 2
    fit = slice_ellipse(m, (0.5, 1.0))
    assert fit.minor_mm == pytest.approx(20, rel=0.02)
    assert fit.major_mm == pytest.approx(20, rel=0.02)
    assert fit.area_mm2 == pytest.approx(m.sum() * 0.5)
    assert (fit.major_mm, fit.minor_mm) == pytest.approx(brute_moments(m, (0.5, 1.0)), rel=1e-9)


def test_empty_and_tiny_slices():
    assert slice_ellipse(np.zeros((5, 5)), (1, 1)) is None
    m = np.zeros((5, 5), bool)
    m[1, 1:4] = True
    assert slice_ellipse(m, (1, 1)) is None


def test_largest_component_only():
    m = disk(60, 8, center=20)
    m[50:53, 50:53] = True  # stray island
    m[45, 5] = True
    fit = slice_ellipse(m, (1, 1))
    ref = slice_ellipse(disk(60, 8, center=20), (1, 1))
    assert fit == ref


def test_diagonal_neighbours_are_separate_components():
    m = np.zeros((10, 10), bool)
    m[0:3, 0:3] = True  # 9 voxels
    m[3:6, 3:7] = True  # 12 voxels touching only diagonally
    fit = slice_ellipse(m, (1, 1))
    assert fit.area_mm2 == 12


@given(a=st.floats(4, 14), b=st.floats(4, 14), theta=st.floats(0, math.pi))
def test_slice_ellipse_matches_brute_force(a, b, theta):
    i, j = np.mgrid[:40, :40] - 19.5
    u = i * math.cos(theta) + j * math.sin(theta)
    v = -i * math.sin(theta) + j * math.cos(theta)
    m = (u / a) ** 2 + (v / b) ** 2 <= 1
    fit = slice_ellipse(m, (1, 1))
    major, minor = brute_moments(m, (1, 1))
    assert fit.minor_mm <= fit.major_mm
    assert fit.major_mm == pytest.approx(major, rel=1e-9)
    assert fit.minor_mm == pytest.approx(minor, rel=1e-9)


# -- max_minor_diameter -----------------------------------------------------


def _measure(spec, dims=DIMS, spacing=(1, 1, 1)):
    mask, truth = make_cylinder(spec, spacing, dims)
    return max_minor_diameter(mask, constant_volume(dims, spacing=spacing)), truth, mask


def test_straight_cylinder():
    rep, truth, _ = _measure(CylinderSpec(30.0))
    assert abs(rep.max_diameter_mm - 30) <= _tol(30)


def test_oblique_cylinder_minor_and_major():
    spec = CylinderSpec(30.0, tilt_deg=30.0)
    rep, _, mask = _measure(spec)
    assert abs(rep.max_diameter_mm - 30) <= _tol(30)
    k = DIMS[2] // 2
    fit = slice_ellipse(mask.labels[:, :, k], (1, 1))
    expected_major = 30 / math.cos(math.radians(30))
    assert expected_major == pytest.approx(34.64, abs=0.01)
    assert abs(fit.major_mm - expected_major) <= 1 + 0.05 * expected_major


def test_fusiform_bulge_slice():
    rep, truth, _ = _measure(CylinderSpec(25.0, bulge=Bulge(40, 45.0)))
    assert truth == 45.0
    assert rep.max_slice_index == 40
    assert abs(rep.max_diameter_mm - 45) <= _tol(45)
    assert rep.aneurysm_flag


@pytest.mark.parametrize("tilt", [0, 15, 30, 45])
def test_tilt_invariance_of_minor_axis(tilt):
    rep, _, mask = _measure(CylinderSpec(30.0, tilt_deg=tilt, azimuth_deg=20.0))
    assert abs(rep.max_diameter_mm - 30) <= _tol(30)
    fit = slice_ellipse(mask.labels[:, :, DIMS[2] // 2], (1, 1))
    major = 30 / math.cos(math.radians(tilt))
    assert abs(fit.major_mm - major) <= 1 + 0.05 * major


def test_ties_go_to_smallest_slice_index():
    labels = np.zeros((20, 20, 6), np.uint8)
    for k in (1, 3, 4):
        labels[:, :, k] = disk(20, 5)
    rep = max_minor_diameter(LabelMask(labels), constant_volume(labels.shape))
    assert rep.max_slice_index == 1


def test_empty_mask_raises():
    with pytest.raises(EmptySegmentation):
        max_minor_diameter(LabelMask(np.zeros((5, 5, 5), np.uint8)), constant_volume((5, 5, 5)))


def test_profile_consistency_and_crop():
    dims = (64, 64, 40)
    mask, _ = make_cylinder(CylinderSpec(20.0, bulge=Bulge(30, 28.0, half_length_mm=4)), (1, 1, 1), dims)
    vol = constant_volume(dims)
    spine = spine_mask(dims, 5, 25)
    rep = run_aaq(vol, mask, spine)
    assert rep.crop_range == (5, 25)
    assert [k for k, _ in rep.profile] == list(range(5, 26))
    assert rep.max_diameter_mm == max(d for _, d in rep.profile if d is not None)
    assert rep.crop_range[0] <= rep.max_slice_index <= rep.crop_range[1]
    full = run_aaq(vol, mask)
    assert full.max_slice_index == 30


def test_translation_invariance():
    dims = (96, 96, 48)
    base, _ = make_cylinder(CylinderSpec(24.0, tilt_deg=20, bulge=Bulge(20, 32.0)), (1, 1, 1), dims)
    shifted = np.zeros(dims, np.uint8)
    shifted[3:, :-2, 4:] = base.labels[:-3, 2:, :-4]
    vol = constant_volume(dims)
    r0 = max_minor_diameter(base, vol)
    r1 = max_minor_diameter(LabelMask(shifted), vol)
    assert abs(r1.max_diameter_mm - r0.max_diameter_mm) / r0.max_diameter_mm < 0.005
    assert r1.max_slice_index == r0.max_slice_index + 4


def test_hu_independence():
    dims = (64, 64, 20)
    mask, _ = make_cylinder(CylinderSpec(20.0, tilt_deg=10), (1, 1, 1), dims)
    rng = np.random.default_rng(5)
    a = max_minor_diameter(mask, Volume(np.zeros(dims), (1, 1, 1)))
    b = max_minor_diameter(mask, Volume(rng.normal(0, 500, dims), (1, 1, 1)))
    assert a == b


def test_dilation_never_decreases_diameter():
    dims = (64, 64, 20)
    mask, _ = make_cylinder(CylinderSpec(18.0, tilt_deg=25, azimuth_deg=60), (1, 1, 1), dims)
    vol = constant_volume(dims)
    before = max_minor_diameter(mask, vol).max_diameter_mm
    struct = ndimage.generate_binary_structure(3, 1)
    grown = ndimage.binary_dilation(mask.labels > 0, struct)
    after = max_minor_diameter(LabelMask(grown.astype(np.uint8)), vol).max_diameter_mm
    assert after >= before


def test_aneurysm_flag_threshold_strict():
    labels = np.zeros((20, 20, 1), np.uint8)
    labels[:, :, 0] = disk(20, 5)
    vol = constant_volume(labels.shape)
    d = max_minor_diameter(LabelMask(labels), vol).max_diameter_mm
    at = max_minor_diameter(LabelMask(labels), vol, config=PipelineConfig(aneurysm_threshold_mm=d))
    below = max_minor_diameter(LabelMask(labels), vol, config=PipelineConfig(aneurysm_threshold_mm=d - 1e-6))
    assert not at.aneurysm_flag and below.aneurysm_flag


# -- emit_profile -----------------------------------------------------------


def test_profile_csv_with_absent_value(tmp_path):
    rep = DiameterReport(22.5, 2, ((0, 20.0), (1, None), (2, 22.5)), (0, 2), False)
    path = write_profile_csv(rep, tmp_path / "profile.csv")
    rows = list(csv.reader(open(path)))
    assert rows == [["slice_index", "minor_diameter_mm"], ["0", "20"], ["1", ""], ["2", "22.5"]]


@pytest.mark.parametrize("d, flag", [(45.0, True), (30.0, False)])
def test_emit_profile_json_flag(tmp_path, d, flag):
    rep = DiameterReport(d, 0, ((0, d),), (0, 0), d > 30)
    emit_profile(rep, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["outputs"]["aneurysm_flag"] is flag
    assert (tmp_path / "profile.csv").exists()
