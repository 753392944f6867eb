"""Exception types raised across the package."""


class DCKDError(Exception):
    pass


class ShapeError(DCKDError, ValueError):
    """Input tensor has the wrong rank, channel count or spatial size."""


class StructureError(DCKDError, ValueError):
    """Two parameter sets, feature maps or codebooks do not line up."""


class ParameterError(DCKDError, ValueError):
    """An operator parameter is outside its valid range."""


class LoadError(DCKDError, IOError):
    """A weight, codebook or checkpoint file does not match its schema."""


class ConfigError(DCKDError, ValueError):
    """A configuration key is unknown or has an invalid value."""


class NonFiniteLossError(DCKDError, FloatingPointError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
