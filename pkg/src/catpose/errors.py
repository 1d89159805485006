"""Exception hierarchy.

Everything raised on bad user input derives from :class:`InputError`; the CLI
maps those to exit code 1 and anything else to exit code 2.
"""


class CatposeError(Exception):
    """Base class for all package errors."""


class InputError(CatposeError):
    """Bad file, bad config, or inconsistent inputs."""


class MalformedFileError(InputError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class EmptyMeshError(InputError):
    pass


class DegenerateMeshError(InputError):
    pass


class InvalidPoseError(InputError):
    pass


class ConfigError(InputError):
    pass


class SkeletonSchemaError(InputError):
    pass


class TopologyMismatchError(InputError):
    def __init__(self, message, offending=()):
        self.offending = list(offending)
        super().__init__(message)


class InvalidPartError(InputError):
    pass


class FormatError(InputError):
    """Binary file could not be decoded."""


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DigestMismatchError(InputError):
    pass


class GridMismatchError(CatposeError):
    pass
