"""Synthetic volumes and masks with known ground truth.

Membership is decided at voxel centres without anti-aliasing.  Phantoms use
identity orientation in LPS, so increasing ``j`` is posterior and increasing
``k`` is superior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import BMD_LEVELS, LUMBAR_LEVELS, LabelMask, Volume
from .errors import SpecError


@dataclass(frozen=True)
class Bulge:
    """Fusiform widening centred on the axis point at a given slice.

    The radius follows ``r0 + (rb - r0) * (1 - |u|**p)**(1/p)`` for
    ``|u| < 1`` where ``u`` is the axial distance over ``half_length_mm``.
    """

    slice_index: int
    diameter_mm: float
    half_length_mm: Optional[float] = None
    exponent: float = 1.0


@dataclass(frozen=True)
class CylinderSpec:
    diameter_mm: float
    tilt_deg: float = 0.0
    azimuth_deg: float = 0.0
    center_mm: Optional[tuple] = None
    length_mm: Optional[float] = None
    bulge: Optional[Bulge] = None

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise SpecError(f"diameter must be positive, got {self.diameter_mm}")
        if not 0 <= self.tilt_deg < 60:
            raise SpecError(f"tilt must lie in [0, 60) degrees, got {self.tilt_deg}")
        if self.length_mm is not None and not self.length_mm > 0:
            raise SpecError("length must be positive")
        if self.bulge is not None and not self.bulge.diameter_mm > 0:
            raise SpecError("bulge diameter must be positive")

    def axis(self) -> np.ndarray:
        t = math.radians(self.tilt_deg)
        a = math.radians(self.azimuth_deg)
        return np.array([math.sin(t) * math.cos(a), math.sin(t) * math.sin(a), math.cos(t)])


def _grid(dims, spacing):
    return np.ogrid[tuple(slice(0, n) for n in dims)], tuple(float(s) for s in spacing)


def make_cylinder(spec: CylinderSpec, spacing=(1.0, 1.0, 1.0), dims=(128, 128, 64)):
    """Rasterise a (possibly tilted, possibly bulging) cylinder.

    Returns ``(LabelMask, true_diameter_mm)`` where the true diameter is the
    widest diameter along the vessel.
    """
    (gi, gj, gk), (sx, sy, sz) = _grid(dims, spacing)
    extent = np.array([(n - 1) * s for n, s in zip(dims, (sx, sy, sz))])
    center = np.asarray(spec.center_mm if spec.center_mm is not None else extent / 2.0, dtype=float)
    d = spec.axis()
    vx, vy, vz = gi * sx - center[0], gj * sy - center[1], gk * sz - center[2]
    t = vx * d[0] + vy * d[1] + vz * d[2]
    r2 = (vx - t * d[0]) ** 2 + (vy - t * d[1]) ** 2 + (vz - t * d[2]) ** 2

    radius = np.full(t.shape, spec.diameter_mm / 2.0)
    true_diameter = spec.diameter_mm
    if spec.bulge is not None:
        b = spec.bulge
        if not 0 <= b.slice_index < dims[2]:
            raise SpecError(f"bulge slice {b.slice_index} outside 0..{dims[2] - 1}")
        half = b.half_length_mm if b.half_length_mm is not None else b.diameter_mm
        t_b = (b.slice_index * sz - center[2]) / d[2]
        u = np.abs(t - t_b) / half
        shape = np.clip(1.0 - u ** b.exponent, 0.0, None) ** (1.0 / b.exponent)
        radius = spec.diameter_mm / 2.0 + (b.diameter_mm - spec.diameter_mm) / 2.0 * shape
        true_diameter = max(spec.diameter_mm, b.diameter_mm)
    fg = r2 <= radius ** 2
    if spec.length_mm is not None:
        fg &= np.abs(t) <= spec.length_mm / 2.0
    fg = np.broadcast_to(fg, tuple(dims))
    if fg[0].any() or fg[-1].any() or fg[:, 0].any() or fg[:, -1].any():
        raise SpecError("cylinder leaves the in-plane field of view; enlarge dims or reduce tilt")
    if not fg.any():
        raise SpecError("cylinder does not intersect the volume")
    return LabelMask(fg.astype(np.uint8), {1: "aorta"}, spacing=(sx, sy, sz)), float(true_diameter)


def make_lumbar_spine(dims, spacing, z_lo: int, z_hi: int, levels=LUMBAR_LEVELS,
                      box_mm=(30.0, 30.0), posterior_gap_mm=15.0) -> LabelMask:
    """Stacked block vertebrae between slices ``z_lo..z_hi`` (inclusive), first level on top."""
    if not 0 <= z_lo <= z_hi < dims[2] or z_hi - z_lo + 1 < len(levels):
        raise SpecError(f"invalid vertebral slice range {z_lo}..{z_hi}")
    sx, sy, _ = spacing
    labels = np.zeros(tuple(dims), dtype=np.uint8)
    i_lo, i_hi = _span(dims[0] * sx / 2.0 - box_mm[0] / 2.0, dims[0] * sx / 2.0 + box_mm[0] / 2.0, sx)
    j_lo, j_hi = _span(dims[1] * sy - posterior_gap_mm - box_mm[1], dims[1] * sy - posterior_gap_mm, sy)
    bounds = np.linspace(z_hi + 1, z_lo, len(levels) + 1).round().astype(int)
    names = {}
    for n, level in enumerate(levels, start=1):
        top, bottom = bounds[n - 1], bounds[n]
        labels[i_lo:i_hi, j_lo:j_hi, bottom:top] = n
        names[n] = level
    return LabelMask(labels, names, spacing=tuple(spacing))


def _span(a_mm: float, b_mm: float, s: float):
    """Indices whose centres fall in ``[a_mm, b_mm)``."""
    return int(math.ceil(a_mm / s - 1e-9)), int(math.ceil(b_mm / s - 1e-9))


@dataclass(frozen=True)
class BmdPhantomSpec:
    vertebra_hu: Mapping[str, float] = field(default_factory=lambda: {lv: 335.0 for lv in BMD_LEVELS})
    vat_hu: float = -95.0
    air_hu: float = -1000.0
    noise_sigma: float = 0.0
    seed: int = 0
    miscal: Optional[tuple] = None
    spacing: tuple = (1.0, 1.0, 2.5)
    dims: tuple = (96, 160, 44)

    def __post_init__(self):
        if set(self.vertebra_hu) != set(BMD_LEVELS):
            raise SpecError(f"vertebra_hu must cover {BMD_LEVELS}")
        if not all(math.isfinite(float(v)) for v in self.vertebra_hu.values()):
            raise SpecError("vertebra HU values must be finite")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")


# layout (mm); anterior is low j
_VERT_BOX = (30.0, 30.0)
_VERT_HEIGHT = 20.0
_VERT_GAP = 5.0
_SPINE_POSTERIOR_GAP = 15.0
_VAT_WIDTH = 60.0
_VAT_DEPTH = 30.0
_VAT_SPINE_GAP = 15.0
_AIR_CLEARANCE = 40.0


def make_bmd_phantom(spec: BmdPhantomSpec):
    """Block vertebrae L1-L4, a fat slab anterior of them, air everywhere else.

    Returns ``(volume, spine_mask, vat_mask, truth)``; the truth table holds
    region means before any miscalibration.
    """
    nx, ny, nz = (int(n) for n in spec.dims)
    sx, sy, sz = (float(s) for s in spec.spacing)
    width, depth, height = nx * sx, ny * sy, nz * sz
    stack = len(BMD_LEVELS) * _VERT_HEIGHT + (len(BMD_LEVELS) - 1) * _VERT_GAP
    spine_front = depth - _SPINE_POSTERIOR_GAP - _VERT_BOX[1]
    vat_front = spine_front - _VAT_SPINE_GAP - _VAT_DEPTH
    if vat_front < _AIR_CLEARANCE or max(_VERT_BOX[0], _VAT_WIDTH) > width or stack > height:
        raise SpecError(f"layout does not fit in {spec.dims} voxels at spacing {spec.spacing}")

    rng = np.random.default_rng(spec.seed)
    data = np.full((nx, ny, nz), float(spec.air_hu))
    spine = np.zeros((nx, ny, nz), dtype=np.uint8)
    vat = np.zeros((nx, ny, nz), dtype=np.uint8)

    vi = _span(width / 2 - _VERT_BOX[0] / 2, width / 2 + _VERT_BOX[0] / 2, sx)
    vj = _span(spine_front, spine_front + _VERT_BOX[1], sy)
    z0 = (height - stack) / 2.0
    for n, level in enumerate(BMD_LEVELS, start=1):
        # L1 is the most superior block (highest k)
        top = height - z0 - (n - 1) * (_VERT_HEIGHT + _VERT_GAP)
        vk = _span(top - _VERT_HEIGHT, top, sz)
        spine[vi[0]:vi[1], vj[0]:vj[1], vk[0]:vk[1]] = n
        data[vi[0]:vi[1], vj[0]:vj[1], vk[0]:vk[1]] = float(spec.vertebra_hu[level])

    fi = _span(width / 2 - _VAT_WIDTH / 2, width / 2 + _VAT_WIDTH / 2, sx)
    fj = _span(vat_front, vat_front + _VAT_DEPTH, sy)
    vat[fi[0]:fi[1], fj[0]:fj[1], :] = 1
    data[vat > 0] = float(spec.vat_hu)

    if spec.noise_sigma > 0:
        data += rng.normal(0.0, spec.noise_sigma, data.shape)

    air = (spine == 0) & (vat == 0)
    truth = {
        "vertebra_mean_hu": {lv: float(data[spine == n].mean()) for n, lv in enumerate(BMD_LEVELS, start=1)},
        "vertebra_nominal_hu": {lv: float(spec.vertebra_hu[lv]) for lv in BMD_LEVELS},
        "vat_mean_hu": float(data[vat > 0].mean()),
        "air_mean_hu": float(data[air].mean()),
        "nominal_mean_hu": float(np.mean([float(spec.vertebra_hu[lv]) for lv in BMD_LEVELS])),
        "seed": spec.seed,
        "noise_sigma": spec.noise_sigma,
        "miscal": list(spec.miscal) if spec.miscal is not None else None,
    }
    truth["flag"] = "Low" if truth["nominal_mean_hu"] < 300.0 else "Normal"

    volume = Volume(data, (sx, sy, sz))
    if spec.miscal is not None:
        volume = apply_affine_hu(volume, *spec.miscal)
    spine_mask = LabelMask(spine, dict(enumerate(BMD_LEVELS, start=1)), spacing=(sx, sy, sz))
    vat_mask = LabelMask(vat, {1: "VAT"}, spacing=(sx, sy, sz))
    return volume, spine_mask, vat_mask, truth


def apply_affine_hu(volume: Volume, slope: float, intercept: float) -> Volume:
    """Map every voxel through ``slope * hu + intercept``; geometry unchanged."""
    if slope == 0:
        raise SpecError("slope must be non-zero")
    return volume.with_data(volume.data * float(slope) + float(intercept))
