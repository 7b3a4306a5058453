"""Exception hierarchy shared by every clmrkit module."""


class ClmrError(Exception):
    """Base class for all library errors."""


# audio_io
class MalformedWav(ClmrError):
    pass


class UnsupportedEncoding(ClmrError):
    pass


class InvalidRate(ClmrError):
    pass


class MixedRates(ClmrError):
    pass


# augment
class TooShort(ClmrError):
    pass


class OutOfRange(ClmrError):
    pass


class SilentInput(ClmrError):
    """Noise level is undefined for an all-zero signal."""


# autodiff / model
class ShapeMismatch(ClmrError):
    pass


class DegenerateBatch(ClmrError):
    pass


class NonScalarLoss(ClmrError):
    pass


class InvalidLayer(ClmrError):
    pass


class CheckpointError(ClmrError):
    pass


# contrastive
class ZeroVector(ClmrError):
    pass


class BatchTooSmall(ClmrError):
    pass


class InsufficientSongs(ClmrError):
    pass


# evaluation
class SingleClass(ClmrError):
    pass


class NoPositives(ClmrError):
    pass


class EmptyClip(ClmrError):
    pass


class EmptySubset(ClmrError):
    pass


class EmptySplit(ClmrError):
    pass


# datasets
class MissingFile(ClmrError):
    pass


class BadSplit(ClmrError):
    pass


class DuplicateId(ClmrError):
    pass


class TooFewTags(ClmrError):
    pass


# config
class ConfigError(ClmrError):
    pass


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass
