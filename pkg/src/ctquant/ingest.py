"""DICOM series assembly, series acceptance filters and mask file formats.

Raw mask format (little-endian)::

    uint32 nx, ny, nz
    float64 sx, sy, sz
    uint8  labels[nx * ny * nz]   # C order over [i, j, k], k fastest
"""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    LabelMask,
    PipelineConfig,
    SeriesMeta,
    Volume,
    check_orientation,
    check_pairing,
    slice_normal,
)
from .errors import GeometryMismatch, InconsistentSeries, ParseError, ValidationError

log = logging.getLogger(__name__)

NOT_AXIAL = "NOT_AXIAL"
WRONG_KVP = "WRONG_KVP"
KERNEL_NOT_ALLOWED = "KERNEL_NOT_ALLOWED"
THICKNESS_TOO_LARGE = "THICKNESS_TOO_LARGE"
NOT_ORIGINAL_PRIMARY = "NOT_ORIGINAL_PRIMARY"
INCONSISTENT_SERIES = "INCONSISTENT_SERIES"

GAP_TOLERANCE = 0.10
_RAW_HEADER = struct.Struct("<3I3d")
_LPS_TO_RAS = np.diag([-1.0, -1.0, 1.0, 1.0])


def missing_tag(name: str) -> str:
    return f"MISSING_TAG({name})"


@dataclass(frozen=True)
class FilterDecision:
    reasons: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "reasons", tuple(self.reasons))

    @property
    def accepted(self) -> bool:
        return not self.reasons

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "reasons": list(self.reasons)}


# ---------------------------------------------------------------------------
# filters


def is_axial(orientation, tolerance: float = 0.999) -> bool:
    """True iff the slice normal is within ``tolerance`` (cosine) of the z axis."""
    cos = check_orientation(orientation)
    return abs(float(slice_normal(cos)[2])) >= tolerance


def _orientation_reasons(meta: SeriesMeta, config: PipelineConfig) -> list:
    if meta.orientation is None:
        return [missing_tag("ImageOrientationPatient")]
    try:
        axial = is_axial(meta.orientation, config.axial_tolerance)
    except ValidationError:
        axial = False
    return [] if axial else [NOT_AXIAL]


def aaq_series_filter(meta: SeriesMeta, config: PipelineConfig) -> FilterDecision:
    """Orientation-only acceptance check for the aortic pipeline."""
    return FilterDecision(_orientation_reasons(meta, config))


def _vendor(name: str) -> str:
    tokens = name.replace(",", " ").upper().split()
    return tokens[0] if tokens else ""


def kernel_allowed(manufacturer: str, kernel: str, whitelist) -> bool:
    vendor = _vendor(manufacturer)
    kern = kernel.strip().upper()
    return any(_vendor(m) == vendor and k.strip().upper() == kern for m, k in whitelist)


def bmd_series_filter(meta: SeriesMeta, config: PipelineConfig) -> FilterDecision:
    """All BMD acceptance checks; every violation is reported."""
    reasons = []
    if meta.image_type_flags is None:
        reasons.append(missing_tag("ImageType"))
    elif not {"ORIGINAL", "PRIMARY"} <= meta.image_type_flags:
        reasons.append(NOT_ORIGINAL_PRIMARY)
    reasons += _orientation_reasons(meta, config)
    if meta.kvp is None:
        reasons.append(missing_tag("KVP"))
    elif int(round(meta.kvp)) != int(config.required_kvp):
        reasons.append(WRONG_KVP)
    if config.enforce_kernel:
        if meta.manufacturer is None:
            reasons.append(missing_tag("Manufacturer"))
        if meta.kernel is None:
            reasons.append(missing_tag("ConvolutionKernel"))
        if meta.manufacturer is not None and meta.kernel is not None:
            if not kernel_allowed(meta.manufacturer, meta.kernel, config.kernel_whitelist):
                reasons.append(KERNEL_NOT_ALLOWED)
    if meta.slice_thickness_mm is None:
        reasons.append(missing_tag("SliceThickness"))
    elif meta.slice_thickness_mm > config.max_slice_thickness_mm:
        reasons.append(THICKNESS_TOO_LARGE)
    return FilterDecision(reasons)


# ---------------------------------------------------------------------------
# DICOM


def _opt_float(ds, keyword):
    value = ds.get(keyword)
    if value is None or value == "":
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _opt_str(ds, keyword):
    value = ds.get(keyword)
    if value is None or value == "":
        return None
    if not isinstance(value, str) and hasattr(value, "__iter__"):
        value = "\\".join(str(v) for v in value)
    return str(value).strip() or None


def _read_slice(path: Path):
    import pydicom

    try:
        ds = pydicom.dcmread(str(path))
        pixels = ds.pixel_array
    except Exception as exc:  # pydicom raises a wide variety of errors
        raise ParseError(path, f"cannot parse DICOM slice ({exc})") from exc
    if pixels.ndim != 2:
        raise ParseError(path, "multi-frame pixel data is not supported")
    position = ds.get("ImagePositionPatient")
    if position is None or len(position) != 3:
        raise ParseError(path, "missing ImagePositionPatient")
    spacing = ds.get("PixelSpacing")
    if spacing is None or len(spacing) != 2:
        raise ParseError(path, "missing PixelSpacing")
    slope = _opt_float(ds, "RescaleSlope")
    intercept = _opt_float(ds, "RescaleIntercept")
    hu = pixels.astype(np.float64) * (1.0 if slope is None else slope) + (0.0 if intercept is None else intercept)
    return ds, hu, np.array([float(p) for p in position]), (float(spacing[0]), float(spacing[1]))


def _meta_from_dataset(ds) -> SeriesMeta:
    orient = ds.get("ImageOrientationPatient")
    flags = ds.get("ImageType")
    subgroups = {}
    for keyword, key in (("PatientSex", "sex"), ("Manufacturer", "manufacturer"), ("InstitutionName", "site")):
        value = _opt_str(ds, keyword)
        if value is not None:
            subgroups[key] = value
    if ds.get("ContrastBolusAgent"):
        subgroups["contrast"] = "yes"
    kvp = _opt_float(ds, "KVP")
    thickness = _opt_float(ds, "SliceThickness")
    return SeriesMeta(
        kvp=kvp if kvp and kvp > 0 else None,
        kernel=_opt_str(ds, "ConvolutionKernel"),
        manufacturer=_opt_str(ds, "Manufacturer"),
        slice_thickness_mm=thickness if thickness and thickness > 0 else None,
        image_type_flags=frozenset(str(f) for f in flags) if flags else None,
        orientation=tuple(float(c) for c in orient) if orient and len(orient) == 6 else None,
        series_uid=_opt_str(ds, "SeriesInstanceUID"),
        subgroup_keys=subgroups,
    )


def load_series(path, max_workers: Optional[int] = None):
    """Assemble a directory of single-frame DICOM slices into ``(Volume, SeriesMeta)``."""
    directory = Path(path)
    if not directory.is_dir():
        raise ParseError(directory, "not a directory")
    files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise ParseError(directory, "no DICOM files found")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        parsed = list(pool.map(_read_slice, files))

    uids = {str(ds.get("SeriesInstanceUID", "")) for ds, *_ in parsed}
    if len(uids) > 1:
        raise InconsistentSeries(f"mixed SeriesInstanceUID values in {directory}")
    first = parsed[0][0]
    orient = first.get("ImageOrientationPatient")
    if orient is None or len(orient) != 6:
        raise ParseError(files[0], "missing ImageOrientationPatient")
    orientation = tuple(float(c) for c in orient)
    shapes = {hu.shape for _, hu, _, _ in parsed}
    spacings = {ps for *_, ps in parsed}
    orients = {tuple(round(float(c), 6) for c in ds.ImageOrientationPatient) for ds, *_ in parsed}
    if len(shapes) > 1 or len(spacings) > 1 or len(orients) > 1:
        raise InconsistentSeries(f"slices in {directory} differ in size, spacing or orientation")
    try:
        orientation = check_orientation(orientation)
    except ValidationError as exc:
        raise ParseError(files[0], str(exc)) from exc

    normal = slice_normal(orientation)
    positions = np.array([pos for _, _, pos, _ in parsed])
    depth = positions @ normal
    # ties are broken by the pixel values so that the result is order-free
    order = sorted(range(len(parsed)), key=lambda n: (depth[n], parsed[n][1].tobytes()))
    depth = depth[order]
    if len(order) > 1:
        gaps = np.diff(depth)
        median = float(np.median(gaps))
        if median <= 0 or np.any(np.abs(gaps - median) > GAP_TOLERANCE * median):
            raise InconsistentSeries(f"non-uniform slice spacing in {directory}: gaps {gaps.tolist()}")
        sz = median
    else:
        sz = _opt_float(first, "SliceThickness") or 1.0

    row_spacing, col_spacing = next(iter(spacings))
    # pixel_array is [row, column]; the volume is indexed [i=column, j=row, k]
    data = np.stack([parsed[n][1].T for n in order], axis=-1)
    volume = Volume(
        data=data,
        spacing=(col_spacing, row_spacing, sz),
        orientation=orientation,
        origin=tuple(positions[order[0]]),
    )
    meta = _meta_from_dataset(parsed[order[0]][0])
    log.debug("loaded %d slices from %s", len(order), directory)
    return volume, meta


def write_dicom_series(volume: Volume, meta: SeriesMeta, directory, *, series_uid: Optional[str] = None,
                       intercept: float = -1024.0, shuffle_names: bool = False) -> list:
    """Write a minimal uncompressed CT series (test fixtures and phantom export)."""
    import pydicom
    from pydicom.dataset import FileMetaDataset
    from pydicom.uid import CTImageStorage, ExplicitVRLittleEndian, generate_uid

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    series_uid = series_uid or meta.series_uid or generate_uid(entropy_srcs=[str(volume.dims), str(volume.origin)])
    study_uid = generate_uid(entropy_srcs=[series_uid, "study"])
    cos = np.asarray(volume.orientation)
    normal = slice_normal(cos)
    sx, sy, sz = volume.spacing
    nz = volume.dims[2]
    paths = []
    for k in range(nz):
        stored = np.round(volume.data[:, :, k].T - intercept)
        if stored.min() < -32768 or stored.max() > 32767:
            raise ValidationError("HU values exceed int16 range for DICOM export")
        fm = FileMetaDataset()
        fm.MediaStorageSOPClassUID = CTImageStorage
        fm.MediaStorageSOPInstanceUID = generate_uid(entropy_srcs=[series_uid, str(k)])
        fm.TransferSyntaxUID = ExplicitVRLittleEndian
        ds = pydicom.Dataset()
        ds.file_meta = fm
        ds.SOPClassUID = CTImageStorage
        ds.SOPInstanceUID = fm.MediaStorageSOPInstanceUID
        ds.StudyInstanceUID = study_uid
        ds.SeriesInstanceUID = series_uid
        ds.Modality = "CT"
        ds.InstanceNumber = k + 1
        if meta.image_type_flags is not None:
            ds.ImageType = sorted(meta.image_type_flags, key=lambda f: (f not in ("ORIGINAL", "DERIVED"), f != "PRIMARY", f))
        if meta.kvp is not None:
            ds.KVP = meta.kvp
        if meta.kernel is not None:
            ds.ConvolutionKernel = meta.kernel
        if meta.manufacturer is not None:
            ds.Manufacturer = meta.manufacturer
        if meta.slice_thickness_mm is not None:
            ds.SliceThickness = meta.slice_thickness_mm
        if "sex" in meta.subgroup_keys:
            ds.PatientSex = meta.subgroup_keys["sex"]
        ds.ImageOrientationPatient = [f"{c:.6f}" for c in volume.orientation]
        pos = np.asarray(volume.origin) + k * sz * normal
        ds.ImagePositionPatient = [f"{p:.6f}" for p in pos]
        ds.PixelSpacing = [f"{sy:.6f}", f"{sx:.6f}"]
        ds.RescaleSlope = 1
        ds.RescaleIntercept = intercept
        ds.Rows, ds.Columns = stored.shape
        ds.SamplesPerPixel = 1
        ds.PhotometricInterpretation = "MONOCHROME2"
        ds.BitsAllocated = 16
        ds.BitsStored = 16
        ds.HighBit = 15
        ds.PixelRepresentation = 1
        ds.PixelData = stored.astype("<i2").tobytes()
        name = f"slice_{(nz - 1 - k) if shuffle_names else k:04d}.dcm"
        path = out / name
        ds.save_as(str(path), enforce_file_format=True)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# NIfTI and raw masks


def _affine_lps(dims, spacing, orientation, origin) -> np.ndarray:
    cos = np.asarray(orientation, dtype=float)
    out = np.eye(4)
    out[:3, :3] = np.column_stack([cos[:3], cos[3:], slice_normal(cos)]) * np.asarray(spacing, dtype=float)
    out[:3, 3] = origin
    return out


def _geometry_from_affine(affine_ras: np.ndarray):
    lps = _LPS_TO_RAS @ affine_ras
    axes = lps[:3, :3]
    spacing = np.linalg.norm(axes, axis=0)
    if np.any(spacing <= 0):
        raise ValidationError("NIfTI affine has a zero-length axis")
    unit = axes / spacing
    orientation = tuple(unit[:, 0]) + tuple(unit[:, 1])
    return tuple(float(s) for s in spacing), orientation, tuple(float(o) for o in lps[:3, 3])


def save_nifti(path, array, spacing, orientation=(1, 0, 0, 0, 1, 0), origin=(0, 0, 0)) -> Path:
    import nibabel as nib

    path = Path(path)
    affine = _LPS_TO_RAS @ _affine_lps(np.shape(array), spacing, orientation, origin)
    img = nib.Nifti1Image(np.asarray(array), affine)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))
    return path


def _load_nifti(path: Path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise ParseError(path, f"cannot read NIfTI ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ParseError(path, f"expected a 3D image, got shape {data.shape}")
    spacing, orientation, origin = _geometry_from_affine(img.affine)
    return data, spacing, orientation, origin


def save_volume(volume: Volume, path, meta: Optional[SeriesMeta] = None) -> Path:
    """Write a volume as float32 NIfTI with an optional ``.meta.json`` sidecar."""
    path = save_nifti(path, volume.data.astype(np.float32), volume.spacing, volume.orientation, volume.origin)
    if meta is not None:
        sidecar = meta_sidecar_path(path)
        sidecar.write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def meta_sidecar_path(path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".meta.json")


def load_volume(path):
    """Read a NIfTI volume; metadata comes from the sidecar when present."""
    path = Path(path)
    data, spacing, orientation, origin = _load_nifti(path)
    volume = Volume(data.astype(np.float64), spacing, check_orientation(np.round(orientation, 9)), origin)
    sidecar = meta_sidecar_path(path)
    if sidecar.exists():
        try:
            meta = SeriesMeta.from_dict(json.loads(sidecar.read_text()))
        except (ValueError, ValidationError) as exc:
            raise ParseError(sidecar, str(exc)) from exc
    else:
        meta = SeriesMeta(orientation=volume.orientation)
    return volume, meta


def save_raw_mask(mask: LabelMask, path, spacing=None) -> Path:
    spacing = spacing if spacing is not None else mask.spacing
    if spacing is None:
        raise ValidationError("raw mask export needs voxel spacing")
    if mask.labels.size and mask.labels.max() > 255:
        raise ValidationError("raw mask format stores labels as uint8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(*mask.dims, *map(float, spacing)))
        fh.write(np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes(order="C"))
    return path


def _load_raw_mask(path: Path):
    blob = path.read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise ParseError(path, "truncated raw mask header")
    nx, ny, nz, sx, sy, sz = _RAW_HEADER.unpack_from(blob)
    body = blob[_RAW_HEADER.size:]
    if len(body) != nx * ny * nz:
        raise ParseError(path, f"raw mask body has {len(body)} bytes, expected {nx * ny * nz}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape((nx, ny, nz))
    return labels, (sx, sy, sz)


def load_mask(path, label_names=None, volume: Optional[Volume] = None) -> LabelMask:
    """Read a NIfTI (``.nii``/``.nii.gz``) or raw (anything else) label mask.

    Label names come from ``label_names`` or a ``<stem>.labels.json``
    sidecar; when ``volume`` is given the grid must match it.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(path, "no such file")
    if path.name.endswith((".nii", ".nii.gz")):
        data, spacing, _, _ = _load_nifti(path)
        if data.dtype.kind == "f":
            if not np.all(data == np.round(data)):
                raise ParseError(path, "mask contains non-integer labels")
        labels = np.asarray(data).astype(np.int32)
    else:
        labels, spacing = _load_raw_mask(path)
    if label_names is None:
        sidecar = labels_sidecar_path(path)
        if sidecar.exists():
            label_names = {int(k): v for k, v in json.loads(sidecar.read_text()).items()}
        else:
            label_names = {}
    mask = LabelMask(labels, label_names, spacing=spacing)
    if volume is not None:
        check_pairing(volume, mask, what=path.name)
    return mask


def labels_sidecar_path(path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".nii.gz", ".nii", ".raw", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".labels.json")


def save_mask(mask: LabelMask, path, spacing=None) -> Path:
    """Write ``mask`` as NIfTI or raw (by extension) plus a label-name sidecar."""
    path = Path(path)
    spacing = spacing if spacing is not None else mask.spacing
    if path.name.endswith((".nii", ".nii.gz")):
        if spacing is None:
            raise ValidationError("NIfTI mask export needs voxel spacing")
        dtype = np.uint8 if (not mask.labels.size or mask.labels.max() <= 255) else np.int32
        save_nifti(path, mask.labels.astype(dtype), spacing)
    else:
        save_raw_mask(mask, path, spacing)
    sidecar = labels_sidecar_path(path)
    sidecar.write_text(json.dumps({str(k): v for k, v in sorted(mask.label_names.items())}, indent=2) + "\n")
    return path


def file_digest(path) -> str:
    """SHA-256 of a file, or of every file under a directory in name order."""
    import hashlib

    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(os.fsencode(p.relative_to(path).as_posix()))
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


__all__ = [
    "FilterDecision",
    "GeometryMismatch",
    "aaq_series_filter",
    "bmd_series_filter",
    "file_digest",
    "is_axial",
    "kernel_allowed",
    "load_mask",
    "load_series",
    "load_volume",
    "missing_tag",
    "save_mask",
    "save_volume",
    "write_dicom_series",
]
