"""Exception types shared across the compressor."""


class GbatcError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGeometryError(GbatcError):
    """Block geometry incompatible with the dataset dimensions."""


class InvalidSpecError(GbatcError):
    """A configuration or synthesis spec fails validation."""


class CoverageError(GbatcError):
    """Block set does not tile the domain exactly once."""


class ShapeError(GbatcError):
    """Tensor shape mismatch, annotated with the offending layer."""


class StateError(GbatcError):
    """Operation called out of order (e.g. backward before forward)."""


class ConfigError(GbatcError):
    """Network or pipeline configuration is internally inconsistent."""


class RankError(GbatcError):
    """Requested PCA rank exceeds the patch dimension."""


class GuaranteeError(GbatcError):
    """Error-bound post-processing could not satisfy its contract."""


class EncodingError(GbatcError):
    """Symbol not representable by the active codebook."""


class DecodingError(GbatcError):
    """Bitstream truncated or not decodable by the active codebook."""


class CorruptArchiveError(GbatcError):
    """Archive failed validation (magic, version, checksum, truncation)."""

    def __init__(self, message: str, section: str | None = None):
        super().__init__(f"{message} (section {section})" if section else message)
        self.section = section
