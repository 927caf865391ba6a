"""Exception hierarchy shared by the library and the command line."""


class CloudMambaError(Exception):
    """Base class; the CLI prints ``<ClassName>: <message>`` and exits nonzero."""

    exit_code = 2


class InvalidParameterError(CloudMambaError, ValueError):
    pass


class ShapeError(CloudMambaError, ValueError):
    pass


class DomainError(CloudMambaError, ValueError):
    pass


class ConfigError(CloudMambaError, ValueError):
    pass


class ConfigMismatchError(ConfigError):
    pass


class CheckpointError(CloudMambaError):
    pass


class DatasetError(CloudMambaError):
    pass


class MissingMaskError(DatasetError):
    pass


class CorruptFileError(DatasetError):
    pass


class ManifestMismatchError(DatasetError):
    pass


class NonFiniteLossError(CloudMambaError, FloatingPointError):
    pass
