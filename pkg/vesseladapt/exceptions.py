"""
Error Catalog
Every failure the pipeline reports, with the HTTP status the service maps it to
"""
from fastapi import status


class VesselAdaptError(Exception):
    """Base error: carries a human-readable detail and an HTTP status"""

    status_code: int = status.HTTP_400_BAD_REQUEST
    error: str = "Vessel Adaptation Error"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ==================== Files and datasets ====================

class MissingFile(VesselAdaptError):
    status_code = status.HTTP_404_NOT_FOUND
    error = "Missing File"


class CorruptHeader(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Corrupt Header"


class ShapeMismatch(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Shape Mismatch"


class NonFiniteValues(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Non-finite Values"


class IllegalLabel(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Illegal Label"


class OverlappingSplits(VesselAdaptError):
    error = "Overlapping Splits"


class MissingAnnotation(VesselAdaptError):
    error = "Missing Annotation"


# ==================== Preprocessing and synthesis ====================

class EmptyDataset(VesselAdaptError):
    error = "Empty Dataset"


class MixedDomains(VesselAdaptError):
    error = "Mixed Domains"


class DegenerateOutput(VesselAdaptError):
    error = "Degenerate Output"


class ConstantVolume(VesselAdaptError):
    error = "Constant Volume"


class InvalidChannelCount(VesselAdaptError):
    error = "Invalid Channel Count"


class ChannelCountTooLarge(InvalidChannelCount):
    error = "Channel Count Too Large"


class SpecInfeasible(VesselAdaptError):
    error = "Spec Infeasible"


# ==================== Networks and training ====================

class ResolutionMismatch(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Resolution Mismatch"


class NonFiniteGradient(VesselAdaptError):
    status_code = status.HTTP_500_INTERNAL_SERVER_ERROR
    error = "Non-finite Gradient"


class DivergenceDetected(VesselAdaptError):
    status_code = status.HTTP_500_INTERNAL_SERVER_ERROR
    error = "Divergence Detected"


class EmptyStratum(VesselAdaptError):
    error = "Empty Stratum"


class NoValidRecords(VesselAdaptError):
    error = "No Valid Records"


class CorruptCheckpoint(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Corrupt Checkpoint"


class ConfigMismatch(VesselAdaptError):
    status_code = status.HTTP_409_CONFLICT
    error = "Config Mismatch"


# ==================== Evaluation ====================

class GridMismatch(VesselAdaptError):
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
    error = "Grid Mismatch"


class EmptyMask(VesselAdaptError):
    error = "Empty Mask"
