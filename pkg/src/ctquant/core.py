"""Shared domain types: volumes, masks, ROI boxes and pipeline configuration.

Voxel arrays are indexed ``[i, j, k]``: ``i`` runs along the row direction
cosine (DICOM column index), ``j`` along the column direction cosine (DICOM
row index) and ``k`` along the slice normal.  Spacing is ``(sx, sy, sz)`` in
the same order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import GeometryMismatch, ValidationError

IDENTITY_ORIENTATION = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
LUMBAR_LEVELS = ("L1", "L2", "L3", "L4", "L5")
BMD_LEVELS = ("L1", "L2", "L3", "L4")

# (manufacturer, kernel) pairs accepted by the BMD series filter.
DEFAULT_KERNEL_WHITELIST = (
    ("GE MEDICAL SYSTEMS", "STANDARD"),
    ("Philips", "B"),
    ("Philips", "C"),
    ("Philips", "SB"),
    ("SIEMENS", "B20f"),
    ("SIEMENS", "B30f"),
    ("SIEMENS", "B31f"),
    ("SIEMENS", "B40f"),
    ("SIEMENS", "Bf37f"),
    ("SIEMENS", "Br38f"),
    ("SIEMENS", "Br40d"),
    ("SIEMENS", "I30f"),
    ("SIEMENS", "I40f"),
    ("TOSHIBA", "FC02"),
    ("TOSHIBA", "FC07"),
    ("TOSHIBA", "FC08"),
)

_UNIT_TOL = 1e-4


def _readonly(array, dtype=None):
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def check_orientation(orientation: Sequence[float]) -> tuple:
    """Validate six direction cosines and return them as a float tuple."""
    cos = np.asarray(orientation, dtype=float)
    if cos.shape != (6,) or not np.all(np.isfinite(cos)):
        raise ValidationError(f"orientation must be six finite cosines, got {orientation!r}")
    row, col = cos[:3], cos[3:]
    if abs(np.linalg.norm(row) - 1.0) > _UNIT_TOL or abs(np.linalg.norm(col) - 1.0) > _UNIT_TOL:
        raise ValidationError(f"orientation vectors are not unit length: {orientation!r}")
    if abs(float(row @ col)) > _UNIT_TOL:
        raise ValidationError(f"orientation vectors are not orthogonal: {orientation!r}")
    return tuple(float(c) for c in cos)


def slice_normal(orientation: Sequence[float]) -> np.ndarray:
    cos = np.asarray(orientation, dtype=float)
    return np.cross(cos[:3], cos[3:])


@dataclass(frozen=True)
class Volume:
    """CT volume in Hounsfield Units with physical geometry."""

    data: np.ndarray
    spacing: tuple
    orientation: tuple = IDENTITY_ORIENTATION
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        data = _readonly(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite HU values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing!r}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValidationError(f"origin must have three components, got {self.origin!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", check_orientation(self.orientation))
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume":
        """Same geometry, new voxel values."""
        return Volume(data, self.spacing, self.orientation, self.origin)

    def affine(self) -> np.ndarray:
        """4x4 index-to-patient matrix (LPS millimetres)."""
        cos = np.asarray(self.orientation)
        axes = np.column_stack([cos[:3], cos[3:], slice_normal(cos)])
        out = np.eye(4)
        out[:3, :3] = axes * np.asarray(self.spacing)
        out[:3, 3] = self.origin
        return out


def world_from_voxel(volume: Volume, index) -> tuple:
    """Patient-space position (mm) of the centre of voxel ``index``."""
    idx = np.asarray(index, dtype=float)
    if idx.shape != (3,):
        raise IndexError(f"index must have three components, got {index!r}")
    dims = volume.dims
    for n, (c, d) in enumerate(zip(idx, dims)):
        if not 0 <= c <= d - 1:
            raise IndexError(f"index {tuple(index)} out of bounds for dims {dims} (axis {n})")
    cos = np.asarray(volume.orientation)
    row, col = cos[:3], cos[3:]
    normal = np.cross(row, col)
    sx, sy, sz = volume.spacing
    pos = np.asarray(volume.origin) + idx[0] * sx * row + idx[1] * sy * col + idx[2] * sz * normal
    return tuple(float(p) for p in pos)


@dataclass(frozen=True)
class SeriesMeta:
    """Acquisition metadata.  ``None`` means the tag was absent."""

    kvp: Optional[float] = None
    kernel: Optional[str] = None
    manufacturer: Optional[str] = None
    slice_thickness_mm: Optional[float] = None
    image_type_flags: Optional[frozenset] = None
    orientation: Optional[tuple] = None
    series_uid: Optional[str] = None
    subgroup_keys: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kvp is not None and not self.kvp > 0:
            raise ValidationError(f"kvp must be positive, got {self.kvp!r}")
        if self.slice_thickness_mm is not None and not self.slice_thickness_mm > 0:
            raise ValidationError(f"slice thickness must be positive, got {self.slice_thickness_mm!r}")
        if self.image_type_flags is not None:
            flags = frozenset(str(f).strip().upper() for f in self.image_type_flags)
            object.__setattr__(self, "image_type_flags", flags)
        if self.orientation is not None:
            object.__setattr__(self, "orientation", tuple(float(c) for c in self.orientation))
        object.__setattr__(self, "subgroup_keys", MappingProxyType(dict(self.subgroup_keys)))

    def to_dict(self) -> dict:
        return {
            "kvp": self.kvp,
            "kernel": self.kernel,
            "manufacturer": self.manufacturer,
            "slice_thickness_mm": self.slice_thickness_mm,
            "image_type_flags": sorted(self.image_type_flags) if self.image_type_flags is not None else None,
            "orientation": list(self.orientation) if self.orientation is not None else None,
            "series_uid": self.series_uid,
            "subgroup_keys": dict(sorted(self.subgroup_keys.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SeriesMeta":
        known = {"kvp", "kernel", "manufacturer", "slice_thickness_mm", "image_type_flags",
                 "orientation", "series_uid", "subgroup_keys"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown series metadata fields: {sorted(unknown)}")
        flags = d.get("image_type_flags")
        orient = d.get("orientation")
        return cls(
            kvp=d.get("kvp"),
            kernel=d.get("kernel"),
            manufacturer=d.get("manufacturer"),
            slice_thickness_mm=d.get("slice_thickness_mm"),
            image_type_flags=frozenset(flags) if flags is not None else None,
            orientation=tuple(orient) if orient is not None else None,
            series_uid=d.get("series_uid"),
            subgroup_keys=d.get("subgroup_keys") or {},
        )


@dataclass(frozen=True)
class LabelMask:
    """Integer label grid aligned voxel-for-voxel with a volume; 0 is background."""

    labels: np.ndarray
    label_names: Mapping[int, str] = field(default_factory=dict)
    spacing: Optional[tuple] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValidationError(f"label grid must be 3D, got shape {labels.shape}")
        if labels.dtype.kind == "b":
            labels = labels.astype(np.uint8)
        elif labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValidationError("label grid contains non-integer values")
            labels = labels.astype(np.int32)
        elif labels.dtype.kind not in "iu":
            raise ValidationError(f"label grid must be integer, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        if 0 in names:
            raise ValidationError("label 0 is reserved for background")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "label_names", MappingProxyType(names))
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.labels.shape)

    def label_of(self, name: str) -> Optional[int]:
        for value, label_name in self.label_names.items():
            if label_name == name:
                return value
        return None

    def binary(self, name: Optional[str] = None) -> np.ndarray:
        """Foreground mask for one named label, or for all labels."""
        if name is None:
            return self.labels > 0
        value = self.label_of(name)
        if value is None:
            return np.zeros(self.labels.shape, dtype=bool)
        return self.labels == value


def check_pairing(volume: Volume, mask: LabelMask, what: str = "mask") -> None:
    """Reject masks whose grid does not match the volume."""
    if mask.dims != volume.dims:
        raise GeometryMismatch(f"{what} dims {mask.dims} do not match volume dims {volume.dims}")
    if mask.spacing is not None and not np.allclose(mask.spacing, volume.spacing, rtol=1e-4, atol=1e-6):
        raise GeometryMismatch(f"{what} spacing {mask.spacing} does not match volume spacing {volume.spacing}")


class RoiShape(str, enum.Enum):
    BOX = "Box"
    ELLIPSOID = "Ellipsoid"


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned voxel box ``[lo, hi)``.

    For ellipsoids ``center`` and ``semi_axes`` are in voxel units; when
    omitted the ellipsoid is the one inscribed in the box.
    """

    lo: tuple
    hi: tuple
    shape: RoiShape = RoiShape.BOX
    clipped_fraction: float = 0.0
    center: Optional[tuple] = None
    semi_axes: Optional[tuple] = None

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ValidationError(f"ROI requires lo < hi componentwise, got lo={self.lo} hi={self.hi}")
        if not 0.0 <= self.clipped_fraction <= 1.0:
            raise ValidationError(f"clipped_fraction must lie in [0, 1], got {self.clipped_fraction}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", RoiShape(self.shape))
        if self.shape is RoiShape.ELLIPSOID:
            center = self.center
            semi = self.semi_axes
            if center is None:
                center = tuple((a + b - 1) / 2.0 for a, b in zip(lo, hi))
            if semi is None:
                semi = tuple((b - a) / 2.0 for a, b in zip(lo, hi))
            if any(s <= 0 for s in semi):
                raise ValidationError(f"ellipsoid semi-axes must be positive, got {semi}")
            object.__setattr__(self, "center", tuple(float(c) for c in center))
            object.__setattr__(self, "semi_axes", tuple(float(s) for s in semi))

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def local_mask(self) -> np.ndarray:
        """Membership mask restricted to the box."""
        shape = tuple(b - a for a, b in zip(self.lo, self.hi))
        if self.shape is RoiShape.BOX:
            return np.ones(shape, dtype=bool)
        grids = np.ogrid[tuple(slice(a, b) for a, b in zip(self.lo, self.hi))]
        r2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, self.center, self.semi_axes))
        return np.broadcast_to(r2 <= 1.0, shape).copy()

    def mask(self, dims) -> np.ndarray:
        """Full-grid membership mask; the box must lie inside ``dims``."""
        if any(a < 0 or b > d for a, b, d in zip(self.lo, self.hi, dims)):
            raise ValidationError(f"ROI {self.lo}-{self.hi} exceeds grid {tuple(dims)}")
        out = np.zeros(tuple(dims), dtype=bool)
        out[self.slices] = self.local_mask()
        return out

    def to_dict(self) -> dict:
        d = {"lo": list(self.lo), "hi": list(self.hi), "shape": self.shape.value,
             "clipped_fraction": self.clipped_fraction}
        if self.shape is RoiShape.ELLIPSOID:
            d["center"] = list(self.center)
            d["semi_axes"] = list(self.semi_axes)
        return d


def in_plane_axes(volume: Volume, frame: str = "LPS") -> tuple:
    """Return ``(ap_axis, ap_sign, lateral_axis)`` for an axial volume.

    ``ap_axis`` is the in-plane voxel axis (0 or 1) best aligned with the
    patient anterior direction and ``ap_sign`` is +1 when increasing index
    moves anteriorly.  In LPS the anterior direction is -Y; in RAS it is +Y.
    """
    if frame not in ("LPS", "RAS"):
        raise ValidationError(f"unknown patient frame {frame!r}")
    anterior_y = -1.0 if frame == "LPS" else 1.0
    cos = np.asarray(volume.orientation)
    comp = np.array([cos[1], cos[4]]) * anterior_y
    ap_axis = int(np.argmax(np.abs(comp)))
    if abs(comp[ap_axis]) < 0.5:
        raise ValidationError("no in-plane axis is aligned with the anterior-posterior direction")
    return ap_axis, int(np.sign(comp[ap_axis])), 1 - ap_axis


@dataclass(frozen=True)
class PipelineConfig:
    bmd_hu_threshold: float = 300.0
    air_qc_lo: float = -1050.0
    air_qc_hi: float = -950.0
    vat_ref_hu: float = -95.0
    air_ref_hu: float = -1000.0
    axial_tolerance: float = 0.999
    kernel_whitelist: tuple = DEFAULT_KERNEL_WHITELIST
    enforce_kernel: bool = True
    max_slice_thickness_mm: float = 5.0
    required_kvp: int = 120
    lumbar_crop_margin_mm: float = 0.0
    roi_fraction: float = 0.4
    min_roi_voxels: int = 50
    air_roi_offset_mm: float = 20.0
    air_roi_ap_mm: float = 20.0
    air_roi_lateral_mm: float = 50.0
    max_air_clipped_fraction: float = 0.5
    calibration_slope_min: float = 0.5
    calibration_slope_max: float = 2.0
    patient_frame: str = "LPS"
    aneurysm_threshold_mm: float = 30.0
    min_fit_voxels: int = 4
    score_conversion: Optional[tuple] = None

    def __post_init__(self):
        wl = tuple((str(m), str(k)) for m, k in self.kernel_whitelist)
        object.__setattr__(self, "kernel_whitelist", wl)
        if self.score_conversion is not None:
            sc = tuple(float(v) for v in self.score_conversion)
            if len(sc) != 3:
                raise ValidationError("score_conversion needs (slope, offset, t_z_factor)")
            object.__setattr__(self, "score_conversion", sc)
        if not self.air_qc_lo < self.air_qc_hi:
            raise ValidationError("air_qc_lo must be below air_qc_hi")
        if not self.vat_ref_hu > self.air_ref_hu:
            raise ValidationError("vat_ref_hu must exceed air_ref_hu")
        if not 0.0 < self.roi_fraction < 1.0:
            raise ValidationError("roi_fraction must lie in (0, 1)")
        if not 0.0 < self.axial_tolerance <= 1.0:
            raise ValidationError("axial_tolerance must lie in (0, 1]")
        if not 0.0 < self.calibration_slope_min < self.calibration_slope_max:
            raise ValidationError("calibration slope guard must satisfy 0 < min < max")
        if self.patient_frame not in ("LPS", "RAS"):
            raise ValidationError("patient_frame must be LPS or RAS")
        if self.max_slice_thickness_mm <= 0 or self.required_kvp <= 0:
            raise ValidationError("thickness and kVp limits must be positive")
        if self.lumbar_crop_margin_mm < 0:
            raise ValidationError("lumbar_crop_margin_mm must be non-negative")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d["kernel_whitelist"] = [list(p) for p in self.kernel_whitelist]
        d["score_conversion"] = list(self.score_conversion) if self.score_conversion else None
        return d
