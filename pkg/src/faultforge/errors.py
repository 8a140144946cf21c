"""Exception hierarchy shared by every faultforge subsystem."""

import errno as _errno


class FaultForgeError(Exception):
    """Base class for all framework errors."""


class ConfigError(FaultForgeError):
    pass


class UnknownPathError(ConfigError, KeyError):
    def __init__(self, path):
        super().__init__(path)
        self.path = path

    def __str__(self):
        return f"no such config node: {self.path}"


class BoundsError(ConfigError, ValueError):
    pass


class PermissionDeniedError(ConfigError, PermissionError):
    pass


class FaultSpecError(ConfigError, ValueError):
    """Malformed boot-time fault spec; ``field`` names the offending slot."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NoSuchTaskError(FaultForgeError, LookupError):
    pass


class DuplicateCapabilityError(FaultForgeError, ValueError):
    pass


class IOFault(FaultForgeError):
    """An I/O completed with an error status."""

    errno = _errno.EIO

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class DeviceTimeout(IOFault):
    errno = _errno.ETIMEDOUT


class DeviceFailedError(IOFault):
    """The whole device is gone; every request errors."""


class AllocationError(FaultForgeError, MemoryError):
    errno = _errno.ENOMEM


class StoreError(FaultForgeError):
    def __init__(self, err, message=""):
        self.errno = -abs(err)
        name = _errno.errorcode.get(abs(err), str(abs(err)))
        super().__init__(f"{name} ({self.errno}){': ' + message if message else ''}")


class MountError(StoreError):
    pass


class FormatError(FaultForgeError, ValueError):
    pass


class GeometryMismatchError(FaultForgeError, ValueError):
    pass


class CombinatorialLimitError(FaultForgeError):
    pass


class TraceFormatError(FaultForgeError, ValueError):
    pass
