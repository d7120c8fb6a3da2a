"""
Contains generic error classes, error codes and type aliases for the ncflow package
"""

from enum import IntEnum
from typing import *

import jax

Tensor = jax.Array
"""Tensor type alias

Dense float64 array; the numeric carrier for states, contexts and weights.
"""
ContextSet = jax.Array
"""Context set type alias

`float64[m, d_xi]` matrix holding one learnable context vector per environment.
"""
Coordinates = Tuple[int, ...]
"""Coordinates type alias

`(env, traj, pool_member)` indices locating a candidate trajectory.
"""


class ErrorCode(IntEnum):
    """Status codes carried by every `NcfError`"""

    SUCCESS = 0
    SHAPE_MISMATCH = 1
    NON_FINITE = 2
    NESTING_DEPTH = 3
    STEP_LIMIT = 4
    INVALID_POOL = 5
    INVALID_CONFIG = 6
    SIZE_MISMATCH = 7
    CHECKSUM_MISMATCH = 8
    UNKNOWN_DTYPE = 9
    BAD_MANIFEST = 10
    UNDERDETERMINED = 11
    UNDEFINED_SPREAD = 12


class NcfError(Exception):
    """Base class for ncflow errors

    Attributes:
        code (ErrorCode): Status code describing the failure
    """

    default_code = ErrorCode.SUCCESS

    def __init__(self, message: str = "", code: Optional[ErrorCode] = None):
        super().__init__(message)
        self.code = self.default_code if code is None else code

    def __bool__(self):
        return self.code == ErrorCode.SUCCESS


class ShapeError(NcfError, ValueError):
    """Operand shapes do not match what a primitive or operation expects"""

    default_code = ErrorCode.SHAPE_MISMATCH


class NonFiniteError(NcfError, FloatingPointError):
    """A NaN or infinity appeared where a finite value was required

    Attributes:
        primitive (Optional[str]): Name of the primitive that produced it, if known
    """

    default_code = ErrorCode.NON_FINITE

    def __init__(self, message: str = "", primitive: Optional[str] = None):
        super().__init__(message)
        self.primitive = primitive


class NestingError(NcfError):
    """Differentiation was nested deeper than the engine supports"""

    default_code = ErrorCode.NESTING_DEPTH


class IntegrationError(NcfError):
    """Numerical integration failed

    Attributes:
        last_time (float): Last accepted integration time
        coordinates (Optional[Coordinates]): Candidate trajectory the failure belongs to
    """

    default_code = ErrorCode.STEP_LIMIT

    def __init__(
        self,
        message: str = "",
        last_time: float = float("nan"),
        coordinates: Optional[Coordinates] = None,
        code: Optional[ErrorCode] = None,
    ):
        if coordinates is not None:
            message = f"{message} at {coordinates}"
        super().__init__(message, code)
        self.last_time = last_time
        self.coordinates = coordinates


class PoolError(NcfError, ValueError):
    """Context pool request cannot be satisfied"""

    default_code = ErrorCode.INVALID_POOL


class ConfigError(NcfError, ValueError):
    """Configuration is invalid or incomplete"""

    default_code = ErrorCode.INVALID_CONFIG


class DatasetError(NcfError):
    """Base class for dataset format failures"""

    default_code = ErrorCode.BAD_MANIFEST


class SizeMismatchError(DatasetError):
    default_code = ErrorCode.SIZE_MISMATCH


class ChecksumError(DatasetError):
    default_code = ErrorCode.CHECKSUM_MISMATCH


class DtypeError(DatasetError):
    default_code = ErrorCode.UNKNOWN_DTYPE


class ManifestError(DatasetError):
    default_code = ErrorCode.BAD_MANIFEST


class IdentificationError(NcfError, ValueError):
    """Too few observations for a parameter identification fit"""

    default_code = ErrorCode.UNDERDETERMINED


class UncertaintyError(NcfError, ValueError):
    """Candidate spread is undefined for the requested expansion set"""

    default_code = ErrorCode.UNDEFINED_SPREAD


NUMERICAL_ERRORS = (NonFiniteError, IntegrationError)
"""Errors that mean a run diverged rather than was misconfigured"""
