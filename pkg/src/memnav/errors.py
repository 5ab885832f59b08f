"""Exception types shared across the package."""


class MemNavError(Exception):
    """Base class for package errors."""


class SceneFormatError(MemNavError):
    """Scene file failed to parse or validate; message names the offending field."""


class StoreFormatError(MemNavError):
    """Memory bank manifest/vector file is corrupt; message names the offending record."""


class GridCapacityError(MemNavError):
    """Voxel grid expansion would exceed the configured voxel budget."""


class OracleError(MemNavError):
    """Base class for model-oracle failures."""


class OracleTransportError(OracleError):
    """Remote call failed (timeout, non-success status) after retries."""


class OversizeImageError(OracleError):
    """Request image exceeds the configured payload cap; raised before sending."""
