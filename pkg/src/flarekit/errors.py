"""Exception hierarchy shared across flarekit modules."""


class FlareKitError(Exception):
    """Base class for all flarekit errors."""


class InvalidMetadataError(FlareKitError, ValueError):
    """Raw metadata violates its invariants (levels, gains, matrix)."""


class ConfigurationError(FlareKitError, ValueError):
    """A pipeline, remover or experiment configuration is invalid."""


class CodecError(FlareKitError):
    """JPEG encode or decode failed."""


class LowConfidenceError(FlareKitError):
    """Translation estimate is not trustworthy."""

    def __init__(self, message, confidence=None):
        super().__init__(message)
        self.confidence = confidence


class CfaPhaseError(FlareKitError, ValueError):
    """A raw shift or crop would change the CFA phase."""


class DegenerateGeometryError(FlareKitError):
    """Too few or collinear correspondences to fit a homography."""


class ManifestParseError(FlareKitError, ValueError):
    """Malformed manifest file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
