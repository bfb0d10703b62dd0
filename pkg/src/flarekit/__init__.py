"""Raw-image flare toolkit: ISP stages, flare synthesis, paired-dataset building and
stage-ordering ablations."""
from __future__ import annotations

from .errors import (CfaPhaseError, CodecError, ConfigurationError, DegenerateGeometryError,
                     FlareKitError, InvalidMetadataError, LowConfidenceError, ManifestParseError)
from .isp import PipelineConfig, RawImage, RawMetadata, run_pipeline
from .metrics import psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "CfaPhaseError", "CodecError", "ConfigurationError", "DegenerateGeometryError",
    "FlareKitError", "InvalidMetadataError", "LowConfidenceError", "ManifestParseError",
    "PipelineConfig", "RawImage", "RawMetadata", "run_pipeline", "psnr", "ssim", "__version__",
]
