"""Exception types raised across the package."""


class HM4Error(Exception):
    """Base class for all hm4 errors."""


class InvalidArgumentError(HM4Error, ValueError):
    pass


class FormatError(HM4Error):
    """Malformed or truncated binary file.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StorageError(HM4Error, OSError):
    pass


class NotFoundError(StorageError, KeyError):
    pass


class LostStateError(HM4Error):
    """The unnormalized posterior vanished: no place is plausible."""


class ConfigError(HM4Error, ValueError):
    pass
