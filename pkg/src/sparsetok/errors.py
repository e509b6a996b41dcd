"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not conform to an operation's rule."""


class DomainError(ValueError):
    """Input value outside the documented domain (e.g. log of non-positive)."""


class ContractError(ValueError):
    """A caller violated an operation's contract (bad K, mismatched mask, ...)."""


class CapacityError(ValueError):
    """A sequence exceeds a fixed capacity such as the positional table."""


class DegenerateDistributionError(ValueError):
    """A probability vector that cannot be sampled from (all mass zero)."""


class ParseError(ValueError):
    """A dataset line could not be parsed; message names the line number."""


class SchemaError(ValueError):
    """A dataset record violates the header schema or a field invariant."""


class ConfigError(ValueError):
    """A run configuration is inconsistent or references missing inputs."""
