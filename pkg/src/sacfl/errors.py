"""Exceptions and warnings shared by every layer of **sacfl**.

Each exception keeps its message template in the class docstring, the same way the
template is filled for every error: ``cleandoc(cls.__doc__).format(**fields)``.
Module-specific errors (configuration, IDX parsing, calibration) live next to the
code raising them and derive from :class:`SacFLError` as well.
"""
import warnings
from inspect import cleandoc
from typing import Any, cast

__all__ = [
    "SacFLError",
    "DimensionError",
    "ValidationError",
    "ContractViolation",
    "PoolLookupError",
    "NumericalError",
    "ZeroBaselineAccuracy",
    "MissingHistoricalDecoder",
]


def _render(exc_or_cls: Any, **fields) -> str:
    doc = cleandoc(cast(str, exc_or_cls.__doc__))
    return doc.format(**fields)


class SacFLError(Exception):
    """{msg}"""

    def __init__(self, msg: str = "Unexpected simulator error"):
        super().__init__(_render(self.__class__, msg=msg))


class DimensionError(SacFLError, ValueError):
    """Shape mismatch in {where}: expected {expected}, got {got}."""

    def __init__(self, where: str, expected: Any, got: Any):
        self.where = where
        self.expected = expected
        self.got = got
        Exception.__init__(
            self, _render(self.__class__, where=where, expected=expected, got=got)
        )


class ValidationError(SacFLError, ValueError):
    """Invalid argument: {msg}"""


class ContractViolation(SacFLError, RuntimeError):
    """Contract violated: {msg}"""


class PoolLookupError(SacFLError, LookupError):
    """No entry {key!r} in the {pool}."""

    def __init__(self, pool: str, key: Any):
        self.pool = pool
        self.key = key
        Exception.__init__(self, _render(self.__class__, pool=pool, key=key))


class NumericalError(SacFLError, ArithmeticError):
    """Non-finite values detected in {msg}."""


class ZeroBaselineAccuracy(RuntimeWarning):
    """Baseline accuracy of client {client} on task {task} is 0.
    The term is excluded from the degradation rate.
    """

    @classmethod
    def warn(cls, client: int, task: int):
        warnings.warn(_render(cls, client=client, task=task), cls, stacklevel=2)


class MissingHistoricalDecoder(RuntimeWarning):
    """Client {client} holds no pooled Decoder for task {task}.
    The current global Decoder is used to evaluate it instead.
    """

    @classmethod
    def warn(cls, client: int, task: int):
        warnings.warn(_render(cls, client=client, task=task), cls, stacklevel=2)
