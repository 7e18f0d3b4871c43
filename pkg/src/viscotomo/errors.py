"""Exception types shared across the package."""


class ViscotomoError(Exception):
    """Base class for all package errors."""


class DomainError(ViscotomoError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConstraintViolation(ViscotomoError, ValueError):
    """Attenuation coefficients breach the admissibility condition of their model."""


class ValidityError(ViscotomoError, ValueError):
    """A wave speed / frequency pair does not describe a decaying wave."""


class CalibrationError(ViscotomoError):
    """No coefficient reproducing the requested quality factor was found."""


class FactorizationError(ViscotomoError):
    """Sparse LU factorization failed (numerically singular operator)."""


class ContractError(ViscotomoError):
    """Inputs produced under inconsistent conditions were combined."""
