"""Exception hierarchy.

Every failure that the CLI can report carries a stable ``reason`` string.
Errors deriving from :class:`SeriesRejected` map to exit code 2, everything
else deriving from :class:`CtQuantError` maps to exit code 3.
"""


class CtQuantError(Exception):
    """Base class; ``reason`` is the machine-readable code used in reports."""

    reason = "Error"
    step = None

    def __init__(self, message="", *, step=None):
        super().__init__(message or self.reason)
        if step is not None:
            self.step = step


class ValidationError(CtQuantError, ValueError):
    reason = "ValidationError"


class ConfigError(CtQuantError, ValueError):
    reason = "ConfigError"
    step = "config"


class ParseError(CtQuantError):
    reason = "ParseError"
    step = "ingest"

    def __init__(self, path, message=""):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}" if message else self.path)


class GeometryMismatch(CtQuantError, ValueError):
    reason = "GeometryMismatch"
    step = "ingest"


class SeriesRejected(CtQuantError):
    """A series failed an acceptance filter; ``reasons`` lists every code."""

    reason = "SeriesRejected"
    step = "series_filter"

    def __init__(self, reasons, message=""):
        self.reasons = list(reasons)
        super().__init__(message or ", ".join(self.reasons))


class InconsistentSeries(SeriesRejected):
    reason = "INCONSISTENT_SERIES"
    step = "ingest"

    def __init__(self, message=""):
        super().__init__(["INCONSISTENT_SERIES"], message or "INCONSISTENT_SERIES")


class PipelineError(CtQuantError):
    reason = "PipelineError"


class SpineIncomplete(PipelineError):
    reason = "SpineIncomplete"
    step = "lumbar_crop"


class EmptySegmentation(PipelineError):
    reason = "EmptySegmentation"
    step = "diameter"


class VertebraMissing(PipelineError):
    reason = "VertebraMissing"
    step = "vertebral_roi"


class RoiTooSmall(PipelineError):
    reason = "RoiTooSmall"
    step = "vertebral_roi"


class VatMissing(PipelineError):
    reason = "VatMissing"
    step = "air_roi"


class AirRoiOutOfField(PipelineError):
    reason = "AirRoiOutOfField"
    step = "air_roi"


class AirQcFail(PipelineError):
    reason = "AirQcFail"
    step = "air_qc"


class DegenerateCalibration(PipelineError):
    reason = "DegenerateCalibration"
    step = "calibration"


class ImplausibleCalibration(PipelineError):
    reason = "ImplausibleCalibration"
    step = "calibration"


class SpecError(CtQuantError, ValueError):
    reason = "SpecError"
    step = "phantom"


class NoData(CtQuantError, ValueError):
    reason = "NoData"
    step = "stats"


class AlignmentError(CtQuantError, ValueError):
    reason = "AlignmentError"
    step = "stats"


class Infeasible(CtQuantError, ValueError):
    reason = "Infeasible"
    step = "stats"
