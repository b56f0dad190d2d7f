import math
import random
import shutil
import string

import numpy as np
import pydicom
import pytest

from ctquant.core import DEFAULT_KERNEL_WHITELIST, LabelMask, PipelineConfig, Volume
from ctquant.errors import GeometryMismatch, InconsistentSeries, ParseError, ValidationError
from ctquant.ingest import (
    FilterDecision,
    aaq_series_filter,
    bmd_series_filter,
    file_digest,
    is_axial,
    load_mask,
    load_series,
    load_volume,
    missing_tag,
    save_mask,
    save_raw_mask,
    save_volume,
    write_dicom_series,
)
from helpers import bmd_meta

CORONAL = (1.0, 0.0, 0.0, 0.0, 0.0, -1.0)


def _three_slice_fixture(directory, **kw):
    vol = Volume(np.zeros((4, 5, 3)), (1.0, 1.0, 2.0))
    write_dicom_series(vol, bmd_meta(), directory, intercept=-1024, **kw)
    return vol


def test_load_series_constructed_fixture(tmp_path):
    _three_slice_fixture(tmp_path)
    ds = pydicom.dcmread(str(tmp_path / "slice_0000.dcm"))
    assert float(ds.RescaleIntercept) == -1024 and int(ds.pixel_array[0, 0]) == 1024
    vol, meta = load_series(tmp_path)
    assert vol.dims == (4, 5, 3)
    assert vol.spacing[2] == pytest.approx(2.0)
    assert np.all(vol.data == 0)
    assert meta.kvp == 120 and meta.kernel == "STANDARD"
    assert {"ORIGINAL", "PRIMARY"} <= meta.image_type_flags


def test_load_series_is_order_insensitive(tmp_path):
    rng = np.random.default_rng(3)
    vol = Volume(rng.integers(-500, 500, (6, 7, 5)).astype(float), (0.7, 0.8, 1.5), origin=(-3, 4, 10))
    write_dicom_series(vol, bmd_meta(), tmp_path / "a")
    write_dicom_series(vol, bmd_meta(), tmp_path / "b", shuffle_names=True)
    # a third copy with arbitrary names in a random order
    names = list((tmp_path / "a").iterdir())
    (tmp_path / "c").mkdir()
    for n, p in enumerate(random.Random(1).sample(names, len(names))):
        shutil.copy(p, tmp_path / "c" / f"{n:02d}_{p.name[::-1]}")
    va, _ = load_series(tmp_path / "a")
    for other in ("b", "c"):
        vb, _ = load_series(tmp_path / other)
        assert np.array_equal(va.data, vb.data) and va.data.tobytes() == vb.data.tobytes()
        assert va.spacing == vb.spacing and va.origin == vb.origin
    assert np.array_equal(va.data, vol.data)
    assert va.origin == pytest.approx(vol.origin)


def test_load_series_axis_convention_with_anisotropic_pixels(tmp_path):
    data = np.zeros((6, 4, 2))
    data[5, 0, 0] = 100  # last column, first row
    vol = Volume(data, (0.5, 0.9, 2.0))
    write_dicom_series(vol, bmd_meta(), tmp_path)
    ds = pydicom.dcmread(str(tmp_path / "slice_0000.dcm"))
    assert (ds.Rows, ds.Columns) == (4, 6)
    assert [float(v) for v in ds.PixelSpacing] == [0.9, 0.5]
    loaded, _ = load_series(tmp_path)
    assert loaded.spacing == pytest.approx((0.5, 0.9, 2.0))
    assert loaded.data[5, 0, 0] == 100


def test_load_series_non_uniform_gap(tmp_path):
    _three_slice_fixture(tmp_path)
    ds = pydicom.dcmread(str(tmp_path / "slice_0002.dcm"))
    pos = [float(v) for v in ds.ImagePositionPatient]
    ds.ImagePositionPatient = [pos[0], pos[1], 7.0]  # gaps 2 and 5
    ds.save_as(str(tmp_path / "slice_0002.dcm"))
    with pytest.raises(InconsistentSeries) as err:
        load_series(tmp_path)
    assert err.value.reasons == ["INCONSISTENT_SERIES"]


def test_load_series_mixed_uids(tmp_path):
    _three_slice_fixture(tmp_path)
    ds = pydicom.dcmread(str(tmp_path / "slice_0001.dcm"))
    ds.SeriesInstanceUID = "2.25.999"
    ds.save_as(str(tmp_path / "slice_0001.dcm"))
    with pytest.raises(InconsistentSeries):
        load_series(tmp_path)


def test_load_series_parse_error_names_file(tmp_path):
    _three_slice_fixture(tmp_path)
    bad = tmp_path / "zz_broken.dcm"
    bad.write_bytes(b"not a dicom file")
    with pytest.raises(ParseError) as err:
        load_series(tmp_path)
    assert str(err.value.path) == str(bad)
    assert str(bad) in str(err.value)


def test_load_series_implicit_little_endian(tmp_path):
    from pydicom.uid import ImplicitVRLittleEndian

    vol = Volume(np.arange(18, dtype=float).reshape(3, 3, 2), (1, 1, 1))
    write_dicom_series(vol, bmd_meta(), tmp_path)
    for path in tmp_path.iterdir():
        ds = pydicom.dcmread(str(path))
        ds.file_meta.TransferSyntaxUID = ImplicitVRLittleEndian
        ds.save_as(str(path), enforce_file_format=True)
    assert pydicom.dcmread(str(path)).file_meta.TransferSyntaxUID == ImplicitVRLittleEndian
    loaded, _ = load_series(tmp_path)
    assert np.array_equal(loaded.data, vol.data)


def test_load_series_rescale_applied(tmp_path):
    vol = Volume(np.full((3, 3, 2), -1000.0), (1, 1, 1))
    write_dicom_series(vol, bmd_meta(), tmp_path, intercept=-2048)
    loaded, _ = load_series(tmp_path)
    assert np.all(loaded.data == -1000)


def test_is_axial_examples():
    assert is_axial((1, 0, 0, 0, 1, 0), 0.999)
    assert not is_axial(CORONAL, 0.999)
    t = math.radians(2.0)
    tilted = (1, 0, 0, 0, math.cos(t), math.sin(t))
    assert abs(math.cos(t)) >= 0.999  # cos 2 deg = 0.99939
    assert is_axial(tilted, 0.999)
    t3 = math.radians(3.0)  # cos 3 deg = 0.99863 < 0.999
    assert not is_axial((1, 0, 0, 0, math.cos(t3), math.sin(t3)), 0.999)
    with pytest.raises(ValidationError):
        is_axial((2, 0, 0, 0, 1, 0), 0.999)


def test_aaq_filter_examples():
    cfg = PipelineConfig()
    assert aaq_series_filter(bmd_meta(), cfg).accepted
    d = aaq_series_filter(bmd_meta(orientation=CORONAL), cfg)
    assert not d.accepted and d.reasons == ("NOT_AXIAL",)
    d = aaq_series_filter(bmd_meta(orientation=None), cfg)
    assert d.reasons == (missing_tag("ImageOrientationPatient"),)
    # orientation only: other acquisition parameters do not matter
    assert aaq_series_filter(bmd_meta(kvp=80, kernel="B60f", image_type_flags={"DERIVED"}), cfg).accepted


def test_bmd_filter_examples():
    cfg = PipelineConfig()
    assert bmd_series_filter(bmd_meta(), cfg).accepted
    assert bmd_series_filter(bmd_meta(kvp=100), cfg).reasons == ("WRONG_KVP",)
    d = bmd_series_filter(bmd_meta(manufacturer="SIEMENS", kernel="B60f"), cfg)
    assert d.reasons == ("KERNEL_NOT_ALLOWED",)


def test_bmd_filter_accumulates_reasons():
    meta = bmd_meta(kvp=100, kernel="BONE", slice_thickness_mm=6.0, orientation=CORONAL,
                    image_type_flags={"DERIVED", "SECONDARY"})
    d = bmd_series_filter(meta, PipelineConfig())
    assert set(d.reasons) == {"NOT_ORIGINAL_PRIMARY", "NOT_AXIAL", "WRONG_KVP", "KERNEL_NOT_ALLOWED",
                              "THICKNESS_TOO_LARGE"}


def test_bmd_filter_kvp_rounding_and_thickness_boundary():
    cfg = PipelineConfig()
    assert bmd_series_filter(bmd_meta(kvp=120.4), cfg).accepted
    assert bmd_series_filter(bmd_meta(kvp=120.6), cfg).reasons == ("WRONG_KVP",)
    assert bmd_series_filter(bmd_meta(slice_thickness_mm=5.0), cfg).accepted
    assert bmd_series_filter(bmd_meta(slice_thickness_mm=5.01), cfg).reasons == ("THICKNESS_TOO_LARGE",)


def test_bmd_filter_kernel_switch():
    meta = bmd_meta(kernel="LUNG")
    assert not bmd_series_filter(meta, PipelineConfig()).accepted
    assert bmd_series_filter(meta, PipelineConfig(enforce_kernel=False)).accepted


@pytest.mark.parametrize("manufacturer, kernel", DEFAULT_KERNEL_WHITELIST)
def test_every_whitelisted_kernel_accepted(manufacturer, kernel):
    assert bmd_series_filter(bmd_meta(manufacturer=manufacturer, kernel=kernel), PipelineConfig()).accepted


def test_random_unlisted_kernels_rejected():
    listed = {k.upper() for _, k in DEFAULT_KERNEL_WHITELIST}
    rng = random.Random(2024)
    vendors = ["GE MEDICAL SYSTEMS", "Philips", "SIEMENS", "TOSHIBA"]
    seen = 0
    while seen < 100:
        kernel = "".join(rng.choice(string.ascii_uppercase + string.digits) for _ in range(rng.randint(1, 6)))
        if kernel.upper() in listed:
            continue
        d = bmd_series_filter(bmd_meta(manufacturer=rng.choice(vendors), kernel=kernel), PipelineConfig())
        assert d.reasons == ("KERNEL_NOT_ALLOWED",), kernel
        seen += 1


def test_filters_are_pure():
    meta = bmd_meta(kvp=100)
    cfg = PipelineConfig()
    assert bmd_series_filter(meta, cfg) == bmd_series_filter(meta, cfg)


def test_filter_decision_contract():
    assert FilterDecision(()).accepted
    assert not FilterDecision(("WRONG_KVP",)).accepted
    assert FilterDecision(["A"]).to_dict() == {"accepted": False, "reasons": ["A"]}


def test_raw_mask_roundtrip_and_layout(tmp_path):
    labels = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    mask = LabelMask(labels, {1: "aorta"}, spacing=(0.5, 0.75, 2.5))
    path = save_raw_mask(mask, tmp_path / "m.raw")
    blob = path.read_bytes()
    assert blob[:12] == np.array([2, 3, 4], "<u4").tobytes()
    assert blob[12:36] == np.array([0.5, 0.75, 2.5], "<f8").tobytes()
    assert blob[36:] == labels.tobytes(order="C")
    back = load_mask(path, {1: "aorta"})
    assert np.array_equal(back.labels, labels) and back.spacing == (0.5, 0.75, 2.5)


def test_raw_mask_truncated(tmp_path):
    path = tmp_path / "m.raw"
    path.write_bytes(np.array([2, 2, 2], "<u4").tobytes() + np.zeros(3, "<f8").tobytes() + b"\x00")
    with pytest.raises(ParseError):
        load_mask(path)


def test_nifti_volume_and_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.integers(-1000, 1000, (5, 6, 7)).astype(float), (0.8, 0.9, 2.5), origin=(-10, 20, 30))
    save_volume(vol, tmp_path / "v.nii.gz", bmd_meta())
    back, meta = load_volume(tmp_path / "v.nii.gz")
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == pytest.approx(vol.spacing)
    assert back.origin == pytest.approx(vol.origin)
    assert back.orientation == pytest.approx(vol.orientation)
    assert meta == bmd_meta()
    mask = LabelMask((vol.data > 0).astype(np.uint8), {1: "VAT"}, spacing=vol.spacing)
    save_mask(mask, tmp_path / "vat.nii.gz")
    m = load_mask(tmp_path / "vat.nii.gz", volume=back)
    assert np.array_equal(m.labels, mask.labels) and dict(m.label_names) == {1: "VAT"}


def test_mask_geometry_must_match_volume(tmp_path):
    vol = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
    save_mask(LabelMask(np.zeros((4, 4, 5), np.uint8), spacing=(1, 1, 1)), tmp_path / "m.raw")
    with pytest.raises(GeometryMismatch):
        load_mask(tmp_path / "m.raw", volume=vol)


def test_file_digest_directory_is_stable(tmp_path):
    _three_slice_fixture(tmp_path / "d")
    assert file_digest(tmp_path / "d") == file_digest(tmp_path / "d")
    assert len(file_digest(tmp_path / "d" / "slice_0000.dcm")) == 64
