"""Maximal abdominal aortic diameter from an aorta segmentation.

Each axial slice of the mask is summarised by its moment-equivalent ellipse
and the largest minor axis over the lumbar range is reported.  The minor
axis of an oblique circular cylinder's cross-section equals the cylinder
diameter, so the measurement does not inflate when the aorta runs obliquely
to the axial planes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import LUMBAR_LEVELS, LabelMask, PipelineConfig, Volume, check_pairing, world_from_voxel
from .errors import EmptySegmentation, SpineIncomplete

PROFILE_HEADER = ("slice_index", "minor_diameter_mm")


@dataclass(frozen=True)
class EllipseFit:
    center_mm: tuple
    major_mm: float
    minor_mm: float
    angle_rad: float
    area_mm2: float

    def to_dict(self) -> dict:
        return {
            "center_mm": list(self.center_mm),
            "major_mm": self.major_mm,
            "minor_mm": self.minor_mm,
            "angle_rad": self.angle_rad,
            "area_mm2": self.area_mm2,
        }


@dataclass(frozen=True)
class DiameterReport:
    max_diameter_mm: float
    max_slice_index: int
    profile: tuple
    crop_range: tuple
    aneurysm_flag: bool
    max_fit: Optional[EllipseFit] = None

    def to_dict(self) -> dict:
        return {
            "max_diameter_mm": self.max_diameter_mm,
            "max_slice_index": self.max_slice_index,
            "aneurysm_flag": self.aneurysm_flag,
            "crop_range": list(self.crop_range),
            "max_slice_ellipse": self.max_fit.to_dict() if self.max_fit else None,
            "profile": [{"slice_index": k, "minor_diameter_mm": d} for k, d in self.profile],
        }


def crop_to_lumbar(volume: Volume, spine: LabelMask, margin_mm: float = 0.0):
    """Restrict the slice range to the L1-L5 extent plus a margin.

    Returns the cropped volume and the inclusive ``(z_lo, z_hi)`` range in
    the original slice indices.
    """
    check_pairing(volume, spine, what="spine mask")
    lo, hi = None, None
    for level in LUMBAR_LEVELS:
        present = np.flatnonzero(spine.binary(level).any(axis=(0, 1)))
        if present.size == 0:
            raise SpineIncomplete(f"vertebra {level} not found in the spine mask; series rejected")
        lo = present[0] if lo is None else min(lo, present[0])
        hi = present[-1] if hi is None else max(hi, present[-1])
    margin = int(math.ceil(margin_mm / volume.spacing[2] - 1e-9)) if margin_mm > 0 else 0
    nz = volume.dims[2]
    z_lo = max(0, int(lo) - margin)
    z_hi = min(nz - 1, int(hi) + margin)
    cropped = Volume(
        volume.data[:, :, z_lo:z_hi + 1],
        volume.spacing,
        volume.orientation,
        world_from_voxel(volume, (0, 0, z_lo)),
    )
    return cropped, (z_lo, z_hi)


def _largest_component(fg: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(fg)  # 2D default structure is 4-connected
    if n <= 1:
        return fg
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))  # argmax picks the first label on ties


def slice_ellipse(mask_slice, spacing, min_voxels: int = 4) -> Optional[EllipseFit]:
    """Moment-equivalent ellipse of the largest 4-connected component.

    Axes are full lengths ``4*sqrt(eigenvalue)`` of the physical-coordinate
    covariance, with ``s**2/12`` added per axis for the pixel footprint.
    Returns ``None`` for slices with fewer than ``min_voxels`` voxels in the
    component.
    """
    fg = np.asarray(mask_slice) > 0
    if not fg.any():
        return None
    comp = _largest_component(fg)
    ii, jj = np.nonzero(comp)
    n = ii.size
    if n < min_voxels:
        return None
    sx, sy = float(spacing[0]), float(spacing[1])
    x = ii * sx
    y = jj * sy
    cx, cy = x.mean(), y.mean()
    dx, dy = x - cx, y - cy
    cov = np.array([
        [np.mean(dx * dx) + sx * sx / 12.0, np.mean(dx * dy)],
        [np.mean(dx * dy), np.mean(dy * dy) + sy * sy / 12.0],
    ])
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    major_vec = evecs[:, 1]
    angle = math.atan2(major_vec[1], major_vec[0])
    # fold to (-pi/2, pi/2] so the angle does not depend on eigenvector sign
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    return EllipseFit(
        center_mm=(float(cx), float(cy)),
        major_mm=float(4.0 * math.sqrt(evals[1])),
        minor_mm=float(4.0 * math.sqrt(evals[0])),
        angle_rad=float(angle),
        area_mm2=float(n * sx * sy),
    )


def max_minor_diameter(aorta: LabelMask, volume: Volume, crop_range=None,
                       config: Optional[PipelineConfig] = None) -> DiameterReport:
    """Largest per-slice minor axis within ``crop_range`` (inclusive, original indices)."""
    config = config or PipelineConfig()
    check_pairing(volume, aorta, what="aorta mask")
    fg = aorta.labels > 0
    nz = volume.dims[2]
    z_lo, z_hi = crop_range if crop_range is not None else (0, nz - 1)
    if not (0 <= z_lo <= z_hi < nz):
        raise ValueError(f"crop range {crop_range} outside 0..{nz - 1}")
    spacing = volume.spacing[:2]
    profile = []
    best_k, best_fit = None, None
    for k in range(z_lo, z_hi + 1):
        fit = slice_ellipse(fg[:, :, k], spacing, config.min_fit_voxels)
        profile.append((k, None if fit is None else fit.minor_mm))
        # strict comparison keeps the smallest index on ties
        if fit is not None and (best_fit is None or fit.minor_mm > best_fit.minor_mm):
            best_k, best_fit = k, fit
    if best_fit is None:
        raise EmptySegmentation(f"aorta mask has no measurable slice in range {z_lo}..{z_hi}")
    return DiameterReport(
        max_diameter_mm=best_fit.minor_mm,
        max_slice_index=best_k,
        profile=tuple(profile),
        crop_range=(z_lo, z_hi),
        aneurysm_flag=bool(best_fit.minor_mm > config.aneurysm_threshold_mm),
        max_fit=best_fit,
    )


def run_aaq(volume: Volume, aorta: LabelMask, spine: Optional[LabelMask] = None,
            config: Optional[PipelineConfig] = None) -> DiameterReport:
    """Lumbar crop (when a spine mask is given) followed by the diameter search."""
    config = config or PipelineConfig()
    crop = None
    if spine is not None:
        _, crop = crop_to_lumbar(volume, spine, config.lumbar_crop_margin_mm)
    return max_minor_diameter(aorta, volume, crop, config)


def write_profile_csv(report: DiameterReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROFILE_HEADER)
        for k, d in report.profile:
            writer.writerow((k, "" if d is None else f"{d:.6g}"))
    return path


def emit_profile(report: DiameterReport, path) -> Path:
    """Write ``profile.csv`` and a standalone ``report.json`` into directory ``path``."""
    from .report import build_report, manifest, write_report

    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_profile_csv(report, out / "profile.csv")
        doc = build_report(
            manifest("emit_profile", PipelineConfig(), {}),
            inputs={},
            pipeline={"task": "aaq", "status": "ok", "exit_code": 0},
            outputs=report.to_dict(),
            verdicts={"aneurysm_flag": report.aneurysm_flag},
        )
        write_report(doc, out / "report.json")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write profile outputs to {out}: {exc.strerror}") from exc
    return out
