"""Opportunistic bone-density flag from L1-L4 trabecular HU.

Vertebral means are recalibrated with a two-point line through visceral fat
and external air, then averaged and thresholded.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import (
    BMD_LEVELS,
    LabelMask,
    PipelineConfig,
    RoiBox,
    RoiShape,
    Volume,
    check_pairing,
    in_plane_axes,
)
from .errors import (
    AirQcFail,
    AirRoiOutOfField,
    DegenerateCalibration,
    ImplausibleCalibration,
    RoiTooSmall,
    VatMissing,
    VertebraMissing,
)


class BmdFlag(str, enum.Enum):
    NORMAL = "Normal"
    LOW = "Low"


@dataclass(frozen=True)
class CalibrationFit:
    slope: float
    intercept: float
    mean_vat_hu: float
    mean_air_hu: float
    air_qc_pass: bool

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "mean_vat_hu": self.mean_vat_hu,
            "mean_air_hu": self.mean_air_hu,
            "air_qc_pass": self.air_qc_pass,
        }


@dataclass(frozen=True)
class VertebraMeasurement:
    roi: RoiBox
    raw_mean_hu: float
    recal_mean_hu: float
    raw_median_hu: float
    voxel_count: int

    def to_dict(self) -> dict:
        return {
            "roi": self.roi.to_dict(),
            "raw_mean_hu": self.raw_mean_hu,
            "recal_mean_hu": self.recal_mean_hu,
            "raw_median_hu": self.raw_median_hu,
            "voxel_count": self.voxel_count,
        }


@dataclass(frozen=True)
class BmdResult:
    per_vertebra: Mapping[str, VertebraMeasurement]
    mean_recal_hu: float
    calibration: CalibrationFit
    flag: BmdFlag
    air_roi: Optional[RoiBox] = None
    supplementary: Optional[dict] = field(default=None)

    def to_dict(self) -> dict:
        return {
            "per_vertebra": {level: m.to_dict() for level, m in self.per_vertebra.items()},
            "mean_recal_hu": self.mean_recal_hu,
            "calibration": self.calibration.to_dict(),
            "flag": self.flag.value,
            "air_roi": self.air_roi.to_dict() if self.air_roi else None,
            "supplementary": self.supplementary,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def vertebral_roi(vertebra_mask, volume: Volume, roi_fraction: float = 0.4, min_voxels: int = 50) -> RoiBox:
    """Centroid-centred ellipsoid with semi-axes ``roi_fraction/2`` of the label extent.

    The ellipsoid is later intersected with the label; at least
    ``min_voxels`` voxels must survive the intersection.
    """
    label = np.asarray(vertebra_mask, dtype=bool)
    if label.shape != volume.dims:
        raise ValueError(f"vertebra mask shape {label.shape} does not match volume {volume.dims}")
    idx = np.nonzero(label)
    if idx[0].size == 0:
        raise VertebraMissing("vertebra label is empty")
    center = tuple(float(a.mean()) for a in idx)
    semi = tuple(roi_fraction / 2.0 * float(a.max() - a.min() + 1) for a in idx)
    lo_full = [math.ceil(c - s - 1e-9) for c, s in zip(center, semi)]
    hi_full = [math.floor(c + s + 1e-9) + 1 for c, s in zip(center, semi)]
    lo = [max(0, v) for v in lo_full]
    hi = [min(d, v) for d, v in zip(volume.dims, hi_full)]
    if any(a >= b for a, b in zip(lo, hi)):
        raise RoiTooSmall("vertebral ROI is empty")
    full = RoiBox(lo_full, hi_full, RoiShape.ELLIPSOID, 0.0, center, semi)
    n_full = int(full.local_mask().sum())
    roi = RoiBox(lo, hi, RoiShape.ELLIPSOID, 0.0, center, semi)
    inside = roi.local_mask()
    clipped = 1.0 - inside.sum() / n_full if n_full else 1.0
    roi = RoiBox(lo, hi, RoiShape.ELLIPSOID, float(clipped), center, semi)
    retained = int((inside & label[roi.slices]).sum())
    if retained < min_voxels:
        raise RoiTooSmall(f"vertebral ROI retains {retained} voxels, need at least {min_voxels}")
    return roi


def roi_voxels(volume: Volume, roi: RoiBox, label=None) -> np.ndarray:
    """HU values inside ``roi`` (optionally intersected with a label mask)."""
    inside = roi.local_mask()
    if label is not None:
        inside = inside & np.asarray(label, dtype=bool)[roi.slices]
    return volume.data[roi.slices][inside]


def roi_mean_hu(volume: Volume, roi: RoiBox, label=None) -> float:
    values = roi_voxels(volume, roi, label)
    if values.size == 0:
        raise RoiTooSmall("ROI contains no voxels")
    return float(values.mean())


def place_air_roi(vat: LabelMask, volume: Volume, config: Optional[PipelineConfig] = None) -> RoiBox:
    """Air calibration box anterior to the visceral fat.

    The box's posterior face sits ``air_roi_offset_mm`` anterior of the most
    anterior VAT voxel and it extends a further ``air_roi_ap_mm``.  It is
    ``air_roi_lateral_mm`` wide around the VAT centroid and spans all slices.
    """
    config = config or PipelineConfig()
    check_pairing(volume, vat, what="VAT mask")
    fg = vat.labels > 0
    idx = np.nonzero(fg)
    if idx[0].size == 0:
        raise VatMissing("VAT mask is empty")
    ap_axis, ap_sign, lat_axis = in_plane_axes(volume, config.patient_frame)
    s_ap = volume.spacing[ap_axis]
    s_lat = volume.spacing[lat_axis]
    near = _round_half_up(config.air_roi_offset_mm / s_ap)
    far = _round_half_up((config.air_roi_offset_mm + config.air_roi_ap_mm) / s_ap)
    if ap_sign < 0:
        edge = int(idx[ap_axis].min())
        ap_lo, ap_hi = edge - far, edge - near
    else:
        edge = int(idx[ap_axis].max())
        ap_lo, ap_hi = edge + near + 1, edge + far + 1
    lat_center = float(idx[lat_axis].mean())
    lat_n = _round_half_up(config.air_roi_lateral_mm / s_lat)
    lat_lo = _round_half_up(lat_center - (lat_n - 1) / 2.0)
    lat_hi = lat_lo + lat_n

    lo = [0, 0, 0]
    hi = list(volume.dims)
    lo[ap_axis], hi[ap_axis] = ap_lo, ap_hi
    lo[lat_axis], hi[lat_axis] = lat_lo, lat_hi
    full = np.prod([b - a for a, b in zip(lo, hi)])
    clo = [max(0, a) for a in lo]
    chi = [min(d, b) for d, b in zip(volume.dims, hi)]
    kept = np.prod([max(0, b - a) for a, b in zip(clo, chi)])
    clipped = float(1.0 - kept / full)
    if kept == 0:
        raise AirRoiOutOfField("air ROI lies entirely outside the field of view")
    roi = RoiBox(clo, chi, RoiShape.BOX, clipped)
    if clipped > config.max_air_clipped_fraction:
        err = AirRoiOutOfField(f"air ROI is {clipped:.0%} outside the field of view")
        err.roi = roi
        raise err
    return roi


def air_qc(mean_air_hu: float, config: Optional[PipelineConfig] = None) -> bool:
    """Pass iff the air mean lies within the inclusive QC window."""
    config = config or PipelineConfig()
    return bool(config.air_qc_lo <= mean_air_hu <= config.air_qc_hi)


def two_point_calibration(mean_vat: float, mean_air: float, config: Optional[PipelineConfig] = None) -> CalibrationFit:
    """Line mapping measured (air, VAT) means onto their reference HU values."""
    config = config or PipelineConfig()
    if not mean_vat > mean_air:
        raise DegenerateCalibration(f"VAT mean {mean_vat:.1f} HU is not above air mean {mean_air:.1f} HU")
    slope = (config.vat_ref_hu - config.air_ref_hu) / (mean_vat - mean_air)
    intercept = config.vat_ref_hu - slope * mean_vat
    if not config.calibration_slope_min <= slope <= config.calibration_slope_max:
        raise ImplausibleCalibration(
            f"calibration slope {slope:.3f} outside [{config.calibration_slope_min}, {config.calibration_slope_max}]"
        )
    return CalibrationFit(float(slope), float(intercept), float(mean_vat), float(mean_air), air_qc(mean_air, config))


def recalibrate(hu, fit: CalibrationFit):
    return fit.slope * hu + fit.intercept


def classify(mean_recal_hu: float, config: Optional[PipelineConfig] = None) -> BmdFlag:
    config = config or PipelineConfig()
    return BmdFlag.LOW if mean_recal_hu < config.bmd_hu_threshold else BmdFlag.NORMAL


def supplementary_scores(mean_recal_hu: float, conversion) -> dict:
    """Linear HU-to-score conversion; T differs from Z by an additive factor."""
    slope, offset, t_z_factor = conversion
    z = slope * mean_recal_hu + offset
    return {"dxa_equiv": z, "z_score": z, "t_score": z + t_z_factor}


def run_bmd(volume: Volume, spine: LabelMask, vat: LabelMask, config: Optional[PipelineConfig] = None) -> BmdResult:
    """Vertebral ROIs, air ROI, QC, calibration, recalibration and threshold."""
    config = config or PipelineConfig()
    check_pairing(volume, spine, what="spine mask")
    check_pairing(volume, vat, what="VAT mask")

    labels = {}
    for level in BMD_LEVELS:
        label = spine.binary(level)
        if not label.any():
            raise VertebraMissing(f"vertebra {level} not detected")
        labels[level] = label

    raw = {}
    for level, label in labels.items():
        roi = vertebral_roi(label, volume, config.roi_fraction, config.min_roi_voxels)
        values = roi_voxels(volume, roi, label)
        raw[level] = (roi, float(values.mean()), float(np.median(values)), int(values.size))

    air_roi = place_air_roi(vat, volume, config)
    mean_air = roi_mean_hu(volume, air_roi)
    vat_fg = vat.labels > 0
    mean_vat = float(volume.data[vat_fg].mean())
    if not air_qc(mean_air, config):
        err = AirQcFail(
            f"air ROI mean {mean_air:.1f} HU outside [{config.air_qc_lo}, {config.air_qc_hi}]"
        )
        err.mean_air_hu = mean_air
        raise err
    fit = two_point_calibration(mean_vat, mean_air, config)

    per_vertebra = {
        level: VertebraMeasurement(roi, mean, float(recalibrate(mean, fit)), median, n)
        for level, (roi, mean, median, n) in raw.items()
    }
    mean_recal = float(np.mean([m.recal_mean_hu for m in per_vertebra.values()]))
    supplementary = None
    if config.score_conversion is not None:
        supplementary = supplementary_scores(mean_recal, config.score_conversion)
    return BmdResult(
        per_vertebra=per_vertebra,
        mean_recal_hu=mean_recal,
        calibration=fit,
        flag=classify(mean_recal, config),
        air_roi=air_roi,
        supplementary=supplementary,
    )
