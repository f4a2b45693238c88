"""Exception hierarchy shared across the package."""


class FedFusionError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedFusionError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(FedFusionError):
    """Invalid configuration value or combination."""


class NumericsError(FedFusionError):
    """Non-finite value encountered where finite values are required."""


class DataError(FedFusionError):
    """Dataset construction or ingestion failure."""


class NetpbmError(DataError):
    """A PGM/PPM file could not be parsed."""


class BadNetpbmHeaderError(NetpbmError):
    """Magic number or header fields are invalid."""


class TruncatedNetpbmError(NetpbmError):
    """Pixel payload is shorter than the header declares."""


class CodecError(FedFusionError):
    """Wire-format encoding or decoding failure."""


class BadMagicError(CodecError):
    """Frame does not start with the protocol magic bytes."""


class UnsupportedVersionError(CodecError):
    """Frame carries a protocol version this build does not speak."""


class UnknownTagError(CodecError):
    """Frame carries an unrecognised message tag."""


class TruncatedFrameError(CodecError):
    """Frame or payload ends before the declared length."""


class LengthOverflowError(CodecError):
    """Declared payload length exceeds the allowed maximum."""


class MalformedPayloadError(CodecError):
    """Payload bytes do not form a valid message body."""


class ArtifactMismatchError(FedFusionError):
    """Model artifact layout does not match the target model."""


class ProtocolError(FedFusionError):
    """Federated round orchestration failure (quorum, bad state)."""
