"""Exception types shared across the package."""


class EfMcaError(Exception):
    """Base class for all package errors."""


class DomainError(EfMcaError, ValueError):
    """An observable lies outside the support of its distribution."""


class ParameterError(EfMcaError, ValueError):
    """Natural or mean-value parameters outside their valid region."""


class DegenerateStateError(EfMcaError, ValueError):
    """The all-zero latent state was used where a cause must be active."""


class CapacityError(EfMcaError, RuntimeError):
    """Exact enumeration requested for a latent space that is too large."""
