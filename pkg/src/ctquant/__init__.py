"""Opportunistic CT quantification: abdominal aortic diameter and bone-density flag."""

from .aaq import DiameterReport, EllipseFit, crop_to_lumbar, max_minor_diameter, run_aaq, slice_ellipse
from .bmd import BmdFlag, BmdResult, CalibrationFit, place_air_roi, run_bmd, two_point_calibration, vertebral_roi
from .core import LabelMask, PipelineConfig, RoiBox, RoiShape, SeriesMeta, Volume, world_from_voxel
from .errors import CtQuantError, PipelineError, SeriesRejected
from .ingest import aaq_series_filter, bmd_series_filter, load_mask, load_series, load_volume
from .report import tool_version

__version__ = tool_version()

__all__ = [
    "BmdFlag", "BmdResult", "CalibrationFit", "CtQuantError", "DiameterReport", "EllipseFit", "LabelMask",
    "PipelineConfig", "PipelineError", "RoiBox", "RoiShape", "SeriesMeta", "SeriesRejected", "Volume",
    "aaq_series_filter", "bmd_series_filter", "crop_to_lumbar", "load_mask", "load_series", "load_volume",
    "max_minor_diameter", "place_air_roi", "run_aaq", "run_bmd", "slice_ellipse", "tool_version",
    "two_point_calibration", "vertebral_roi", "world_from_voxel",
]
