"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an API contract (e.g. backward on a non-scalar)."""


class FormatError(ValueError):
    """A serialized file is malformed, truncated, or fails its checksum."""
