"""Exception types shared across the package."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's shape rule."""

    def __init__(self, op: str, *shapes) -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class DomainError(ValueError):
    """Input lies outside an operation's numeric domain (e.g. log of 0)."""


class ContractError(ValueError):
    """A caller broke an API contract (non-scalar root, unstable counts, ...)."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during evaluation.

    Carries the offending iterate so callers can report where things blew up.
    """

    def __init__(self, message: str, iterate: np.ndarray | None = None) -> None:
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, copy=True)


class QPSolveError(RuntimeError):
    """The QP subsolver failed to produce a usable solution."""

    def __init__(self, message: str, status: str = "") -> None:
        super().__init__(message)
        self.status = status


class ConfigError(ValueError):
    """Invalid run configuration; names the offending key."""

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"config key '{key}': {message}")
