"""Exception types shared across the package."""


class SlakError(Exception):
    pass


class InvalidShapeError(SlakError, ValueError):
    pass


class InvalidMaskError(SlakError, ValueError):
    pass


class InvalidCountError(SlakError, ValueError):
    pass


class DegenerateError(SlakError, ValueError):
    """Raised when statistics, plans or maps carry no usable mass."""


class ScheduleRangeError(SlakError, ValueError):
    pass


class ConfigError(SlakError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ConfigMismatchError(ConfigError):
    pass


class CacheError(SlakError, RuntimeError):
    pass


class FormatError(SlakError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(SlakError, ArithmeticError):
    def __init__(self, message, index=None, layer=None):
        super().__init__(message)
        self.index = index
        self.layer = layer
