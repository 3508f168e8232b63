"""Exception hierarchy shared by every stage of the pipeline."""


class RegistrationError(Exception):
    """Base class for all errors raised by salreg."""

    exit_code = 1


class ParameterError(RegistrationError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 2


class DegenerateInputError(RegistrationError):
    """Input geometry or data cannot support the requested computation."""

    exit_code = 3


class FormatError(RegistrationError):
    """A file on disk does not follow its declared format."""

    exit_code = 3


class EstimationFailure(RegistrationError):
    """Pose estimation produced no usable model."""

    exit_code = 4
