from .autograd import DimensionError, GraphStateError, NumericError


class ConfigError(ValueError):
    """Inconsistent configuration (missing autoencoder, unknown key, bad mode)."""


class InputError(ValueError):
    """Bad user data: out-of-range tokens, empty corpora, unlabeled samples."""


class FormatError(ValueError):
    """Checkpoint with a bad magic string or unsupported version."""


class CorruptionError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


__all__ = [
    "ConfigError", "CorruptionError", "DimensionError", "FormatError",
    "GraphStateError", "InputError", "NumericError",
]
