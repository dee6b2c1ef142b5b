"""Exception hierarchy shared by the pipeline stages."""


class RailhazError(Exception):
    """Base class for all errors raised by railhaz."""


class SchemaError(RailhazError):
    """An input file is missing mandatory columns or is otherwise unreadable."""


class ValidationError(RailhazError):
    """Input data violate a documented invariant."""


class JoinError(ValidationError):
    """A measuring spot cannot be matched to the weather grid."""


class DataError(ValidationError):
    """Model data cannot support the requested computation."""


class SingularInformationError(RailhazError):
    """The observed information matrix cannot be inverted."""
