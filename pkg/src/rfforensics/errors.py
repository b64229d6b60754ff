"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class ForensicsError(Exception):
    exit_code = 5


class ConfigError(ForensicsError):
    """Invalid parameters or configuration. May list several violated fields."""

    exit_code = 2

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = list(fields or [])


class DataError(ForensicsError):
    exit_code = 3


class ShapeError(DataError):
    def __init__(self, layer, expected, got):
        super().__init__(f"{layer}: expected shape {expected}, got {got}")
        self.layer = layer
        self.expected = expected
        self.got = got


class KeyMaterialError(DataError):
    """Watermark key refers to devices or frames that are not available."""


class FormatError(DataError):
    """Malformed on-disk artifact. ``code`` distinguishes the failure."""

    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class TamperError(ForensicsError):
    exit_code = 4

    def __init__(self, message, artifact=None, index=None):
        super().__init__(message)
        self.artifact = artifact
        self.index = index


class NumericError(ForensicsError):
    pass


class ChecksumError(TamperError):
    code = "checksum"
