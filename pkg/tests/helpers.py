"""Shared builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ctquant.core import LabelMask, SeriesMeta, Volume

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"


def bmd_meta(**overrides) -> SeriesMeta:
    """Metadata that passes every BMD acceptance check."""
    fields = dict(
        kvp=120.0,
        kernel="STANDARD",
        manufacturer="GE MEDICAL SYSTEMS",
        slice_thickness_mm=3.0,
        image_type_flags=frozenset({"ORIGINAL", "PRIMARY", "AXIAL"}),
        orientation=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        series_uid="2.25.42",
    )
    fields.update(overrides)
    return SeriesMeta(**fields)


def disk(n, radius, center=None):
    c = (n - 1) / 2.0 if center is None else center
    i, j = np.ogrid[:n, :n]
    return ((i - c) ** 2 + (j - c) ** 2) <= radius ** 2


def brute_moments(mask2d, spacing):
    """Equivalent-ellipse axes by explicit loops over foreground voxels."""
    sx, sy = spacing
    pts = [(i * sx, j * sy) for i in range(mask2d.shape[0]) for j in range(mask2d.shape[1]) if mask2d[i, j]]
    n = len(pts)
    mx = sum(p[0] for p in pts) / n
    my = sum(p[1] for p in pts) / n
    cxx = sum((p[0] - mx) ** 2 for p in pts) / n + sx * sx / 12
    cyy = sum((p[1] - my) ** 2 for p in pts) / n + sy * sy / 12
    cxy = sum((p[0] - mx) * (p[1] - my) for p in pts) / n
    tr, det = cxx + cyy, cxx * cyy - cxy * cxy
    disc = max(tr * tr / 4 - det, 0.0) ** 0.5
    lam_hi, lam_lo = tr / 2 + disc, tr / 2 - disc
    return 4 * lam_hi ** 0.5, 4 * lam_lo ** 0.5


def spine_mask(dims, z_lo, z_hi, missing=(), spacing=(1.0, 1.0, 1.0)):
    """Five stacked labels L1..L5 over slices z_lo..z_hi, optionally dropping levels."""
    labels = np.zeros(dims, dtype=np.uint8)
    bounds = np.linspace(z_hi + 1, z_lo, 6).round().astype(int)
    names = {}
    for n in range(1, 6):
        level = f"L{n}"
        names[n] = level
        if level in missing:
            continue
        labels[1:4, 1:4, bounds[n]:bounds[n - 1]] = n
    return LabelMask(labels, names, spacing=spacing)


def load_json(path):
    return json.loads(Path(path).read_text())


def normalized_report(path):
    """Report with run-specific manifest fields removed (golden comparison)."""
    doc = load_json(path)
    man = doc["manifest"]
    man.pop("timestamp", None)
    man.pop("tool_version", None)
    for item in man.get("inputs", []):
        item.pop("path", None)
        item.pop("sha256", None)
    return doc


def constant_volume(dims, value=0.0, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.full(dims, float(value)), spacing)
