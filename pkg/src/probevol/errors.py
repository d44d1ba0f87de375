"""Exception hierarchy. Each category maps to a CLI exit code."""


class ProbevolError(Exception):
    exit_code = 1


class ConfigError(ProbevolError):
    exit_code = 2


class DataError(ProbevolError):
    """Malformed input data: bad schema, missing columns, inconsistent rows."""

    exit_code = 3


class StructuralError(DataError):
    """Shapes or identities that do not line up (dimension or station mismatch)."""


class NumericError(ProbevolError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class ModelFileError(DataError):
    pass


class ModelFormatError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelTruncatedError(ModelFileError):
    pass


class ModelShapeError(ModelFileError):
    pass
