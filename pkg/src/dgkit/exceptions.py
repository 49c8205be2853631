class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class ShapeError(ValueError):
    """Array shapes do not line up."""


class LabelError(ValueError):
    """Class label outside ``[0, n_classes)``."""


class StateError(RuntimeError):
    """An object was used out of order (stale cache, exhausted schedule, ...)."""


class ScheduleExhaustedError(StateError):
    pass


class NumericError(ArithmeticError):
    pass


class FormatError(ValueError):
    """Malformed tensor container or manifest.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
