"""Exception hierarchy shared by every module."""


class TiedSegError(Exception):
    """Base class for all package errors."""


class ShapeError(TiedSegError, ValueError):
    pass


class ConfigError(TiedSegError, ValueError):
    pass


class InputError(TiedSegError, ValueError):
    pass


class StateError(TiedSegError, RuntimeError):
    pass


class _OffsetError(TiedSegError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointFormatError(_OffsetError):
    pass


class ImageFormatError(_OffsetError):
    pass
