import time
import logging
from functools import wraps
from typing import Callable, Any

import numpy as np

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO") -> None:
    """Configure root logging the same way for the CLI and for library use."""
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))


class HdgAuditError(Exception):
    """Base exception for hdg-audit errors."""
    pass


class MeshError(HdgAuditError):
    """Raised for invalid mesh topology or geometry."""
    pass


class MeshFormatError(MeshError):
    """Raised when a mesh file cannot be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MeshValidationError(MeshError):
    """Raised when a mesh violates a structural invariant."""
    pass


class DegenerateCellError(MeshError):
    """Raised for cells with non-positive measure."""
    pass


class QuadratureDegreeError(HdgAuditError):
    """Raised when a quadrature rule of the requested exactness is not available."""
    pass


class BasisDegreeError(HdgAuditError):
    """Raised when a polynomial degree is outside the supported range."""
    pass


class FieldMismatchError(HdgAuditError):
    """Raised when fields live on different meshes or degrees."""
    pass


class EmptyBoundarySubsetError(HdgAuditError):
    """Raised when a boundary subset with positive measure is required but empty."""
    pass


class InteriorFaceRequiredError(HdgAuditError):
    """Raised when an interior-face operation receives a boundary face."""
    pass


class NonFiniteMatrixError(HdgAuditError):
    """Raised when a matrix contains NaN or infinite entries."""
    pass


class IndefiniteFormError(HdgAuditError):
    """Raised when a quadratic form expected to be PSD has a negative eigenvalue."""
    pass


class EigenCrossCheckError(HdgAuditError):
    """Raised when power iteration disagrees with the dense generalized eigensolver."""
    pass


class SolverBreakdownError(HdgAuditError):
    """Raised when a linear solve breaks down or misses its residual target."""
    pass


class SingularLocalBlockError(HdgAuditError):
    """Raised when an HDG local block cannot be factorized."""
    pass


class GaugeRequiredError(HdgAuditError):
    """Raised when a pure Neumann problem is solved without a gauge constraint."""
    pass


class UnknownInequalityError(HdgAuditError):
    """Raised for an inequality id missing from the registry."""
    pass


class UnknownProblemError(HdgAuditError):
    """Raised for a problem name missing from the registry."""
    pass


def log_duration(func: Callable) -> Callable:
    """
    Decorator that logs the wall time of a call at DEBUG level.

    Args:
        func: Function to decorate
    """
    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            logger.debug(f"{func.__qualname__} took {time.perf_counter() - start:.3f}s")
    return wrapper


def require_finite(*arg_names: str) -> Callable:
    """
    Decorator that rejects NaN/inf entries in the named array arguments.

    Args:
        arg_names: Names of the keyword or positional parameters to check
    """
    def decorator(func: Callable) -> Callable:
        names = func.__code__.co_varnames[:func.__code__.co_argcount]

        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            bound = dict(zip(names, args))
            bound.update(kwargs)
            for name in arg_names:
                value = bound.get(name)
                if value is None:
                    continue
                data = value.tocsr().data if hasattr(value, "tocsr") else np.asarray(value, dtype=float)
                if not np.all(np.isfinite(data)):
                    raise NonFiniteMatrixError(f"{func.__name__}: argument '{name}' has non-finite entries")
            return func(*args, **kwargs)
        return wrapper
    return decorator
