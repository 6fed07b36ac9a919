"""Exception hierarchy. Each class carries the process exit code the cli maps it to."""


class GradInitError(Exception):
    exit_code = 1


class ConfigError(GradInitError):
    """Invalid run configuration; the message starts with the dotted field path."""
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        self.detail = message
        super().__init__(f"{field}: {message}" if field else message)

    def __reduce__(self):
        # worker processes send failures back pickled
        return type(self), (self.field, self.detail)


class DataError(GradInitError):
    exit_code = 3


class NumericError(GradInitError):
    exit_code = 4


class AutodiffError(NumericError):
    pass


class ShapeError(NumericError):
    pass


class DegenerateGradientError(NumericError):
    pass


class ArtifactError(GradInitError):
    exit_code = 5
