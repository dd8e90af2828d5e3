"""Problem definition: named tensor variables and the combined callback.

A problem is a set of named tensor variables plus one user callback that
receives the variables as autodiff leaves (bundled in an attribute box)
and returns ``(objective, inequality_exprs, equality_exprs)``. Constraint
slots may be ``None``, a single expression, or a sequence of expressions;
tensor-valued expressions are flattened row-major into scalar constraints.

Named values map to a single flat vector by concatenating variables in
declaration order, each flattened row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, NumericalError, ShapeError

__all__ = ["VariableSpec", "VarBox", "ProblemDefinition", "EvalRecord",
           "evaluate"]


class VariableSpec:
    """Ordered named tensor shapes defining the flat optimization vector."""

    def __init__(self, variables) -> None:
        if isinstance(variables, dict):
            items = list(variables.items())
        else:
            items = [(name, shape) for name, shape in variables]
        if not items:
            raise ContractError("at least one variable is required")
        entries = []
        seen = set()
        for name, shape in items:
            if name in seen:
                raise ContractError(f"duplicate variable name '{name}'")
            seen.add(name)
            if isinstance(shape, (int, np.integer)):
                shape = (int(shape),)
            else:
                shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ContractError(f"variable '{name}' has non-positive dim")
            entries.append((name, shape))
        self.entries: tuple = tuple(entries)
        sizes = [int(np.prod(s, dtype=int)) for _, s in entries]
        self.sizes = tuple(sizes)
        self.offsets = tuple(np.concatenate([[0], np.cumsum(sizes)]).tolist())
        self.size = int(sum(sizes))

    def __iter__(self):
        return iter(self.entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{list(s)}" for n, s in self.entries)
        return f"VariableSpec({inner})"

    def pack(self, values: dict) -> np.ndarray:
        """Concatenate named values into one flat vector, declaration order."""
        parts = []
        for name, shape in self.entries:
            if name not in values:
                raise ContractError(f"missing value for variable '{name}'")
            arr = np.asarray(values[name], dtype=float)
            if arr.shape != shape:
                raise ContractError(
                    f"variable '{name}' expects shape {shape}, got {arr.shape}")
            parts.append(arr.ravel(order="C"))
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, x: np.ndarray) -> dict:
        """Inverse of :meth:`pack`."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.size:
            raise ContractError(
                f"packed point has length {x.size}, expected {self.size}")
        out = {}
        for (name, shape), lo, hi in zip(self.entries, self.offsets,
                                         self.offsets[1:]):
            out[name] = x[lo:hi].reshape(shape).copy()
        return out


class VarBox:
    """Attribute bundle of variable leaves handed to the user callback."""

    def __init__(self, leaves: dict) -> None:
        self.__dict__.update(leaves)

    def __getitem__(self, name: str) -> Node:
        return self.__dict__[name]


@dataclass
class ProblemDefinition:
    """Variables plus the evaluation callback.

    ``fn(box)`` must return ``(f, ci, ce)`` where ``f`` is a scalar
    expression and ``ci``/``ce`` are ``None`` or (sequences of)
    expressions. The callback must be deterministic and produce the same
    constraint layout on every call.
    """

    variables: VariableSpec
    fn: Callable
    name: str = ""
    _counts: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.variables, VariableSpec):
            self.variables = VariableSpec(self.variables)

    @property
    def dim(self) -> int:
        return self.variables.size


@dataclass
class EvalRecord:
    """Values and first-order information at one point."""

    x: np.ndarray
    f: float
    grad_f: np.ndarray
    ci: np.ndarray        # (p,)  constraint values, feasible when <= 0
    ci_jac: np.ndarray    # (p, n)
    ce: np.ndarray        # (q,)
    ce_jac: np.ndarray    # (q, n)

    @property
    def viol_ineq_max(self) -> float:
        return float(np.max(self.ci, initial=0.0).clip(min=0.0))

    @property
    def viol_eq_max(self) -> float:
        return float(np.max(np.abs(self.ce), initial=0.0))

    @property
    def violation_l1(self) -> float:
        """Total violation: sum of positive parts plus absolute equalities."""
        return float(np.clip(self.ci, 0.0, None).sum()
                     + np.abs(self.ce).sum())


def _as_expr_list(block, label: str) -> list:
    if block is None:
        return []
    if isinstance(block, Node):
        return [block]
    if isinstance(block, Sequence):
        out = list(block)
        for e in out:
            if not isinstance(e, Node):
                raise ContractError(f"{label} entries must be expressions")
        return out
    raise ContractError(f"{label} must be None, an expression, or a sequence")


def _flatten_scalars(exprs: list) -> list:
    """Row-major scalar views of each expression, preserving slot order."""
    scalars = []
    for e in exprs:
        if e.shape == ():
            scalars.append(e)
        else:
            flat = e.reshape((e.size,))
            scalars.extend(flat[i] for i in range(e.size))
    return scalars


@dataclass
class PenaltyEval:
    """Penalty value and gradient only; no per-constraint Jacobian rows."""

    x: np.ndarray
    phi: float
    grad_phi: np.ndarray
    f: float
    ci: np.ndarray
    ce: np.ndarray

    @property
    def viol_ineq_max(self) -> float:
        return float(np.max(self.ci, initial=0.0).clip(min=0.0))

    @property
    def viol_eq_max(self) -> float:
        return float(np.max(np.abs(self.ce), initial=0.0))


def evaluate_penalty(problem: ProblemDefinition, x: np.ndarray,
                     mu: float) -> PenaltyEval:
    """Value and gradient of ``mu * f + total violation`` in one backward pass.

    The hinge and absolute-value ops share the solver's subgradient
    conventions (derivative 0 at the kink), so differentiating the penalty
    expression directly agrees with assembling it from Jacobian rows, at a
    fraction of the cost. Line searches live on this path.
    """
    spec = problem.variables
    values = spec.unpack(x)
    tape = Tape()
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        leaves = {name: tape.leaf(name, values[name]) for name, _ in spec}
        result = problem.fn(VarBox(leaves))
        if not isinstance(result, (tuple, list)) or len(result) != 3:
            raise ContractError("callback must return (objective, ci, ce)")
        f_expr, ci_block, ce_block = result
        if not isinstance(f_expr, Node) or f_expr.size != 1:
            raise ContractError("objective must be a scalar expression")
        if f_expr.shape != ():
            f_expr = f_expr.reshape(())
        ci_exprs = _as_expr_list(ci_block, "ci")
        ce_exprs = _as_expr_list(ce_block, "ce")
        counts = (sum(e.size for e in ci_exprs), sum(e.size for e in ce_exprs))
        if problem._counts is None:
            problem._counts = counts
        elif problem._counts != counts:
            raise ContractError(
                f"constraint counts changed from {problem._counts} to {counts}")
        phi_expr = f_expr * mu
        for e in ci_exprs:
            phi_expr = phi_expr + (e.relu().sum() if e.shape != ()
                                   else e.relu())
        for e in ce_exprs:
            phi_expr = phi_expr + (e.abs().sum() if e.shape != ()
                                   else e.abs())
        grads = tape.backward(phi_expr)
        out = PenaltyEval(
            x=np.array(x, dtype=float, copy=True),
            phi=float(phi_expr.value),
            grad_phi=spec.pack(grads),
            f=float(f_expr.value),
            ci=(np.concatenate([e.value.ravel() for e in ci_exprs])
                if ci_exprs else np.zeros(0)),
            ce=(np.concatenate([e.value.ravel() for e in ce_exprs])
                if ce_exprs else np.zeros(0)),
        )
    if not (np.isfinite(out.phi) and np.all(np.isfinite(out.grad_phi))
            and np.all(np.isfinite(out.ci)) and np.all(np.isfinite(out.ce))):
        raise NumericalError("non-finite value in evaluation", iterate=x)
    return out


def evaluate(problem: ProblemDefinition, x: np.ndarray) -> EvalRecord:
    """Run the callback on a fresh tape at ``x`` and differentiate everything.

    Returns the objective, every scalarized constraint value, and one
    gradient row per scalar via reverse-mode passes. Raises
    :class:`NumericalError` if any value or gradient is non-finite, and
    :class:`ContractError` if the constraint layout changes between calls.
    """
    spec = problem.variables
    values = spec.unpack(x)
    tape = Tape()
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _evaluate_on_tape(problem, spec, tape, values, x)


def _evaluate_on_tape(problem, spec, tape, values, x) -> EvalRecord:
    leaves = {name: tape.leaf(name, values[name]) for name, _ in spec}
    result = problem.fn(VarBox(leaves))
    if not isinstance(result, (tuple, list)) or len(result) != 3:
        raise ContractError("callback must return (objective, ci, ce)")
    f_expr, ci_block, ce_block = result
    if not isinstance(f_expr, Node):
        raise ContractError("objective must be an expression node")
    if f_expr.size != 1:
        raise ShapeError("objective", f_expr.shape)
    if f_expr.shape != ():
        f_expr = f_expr.reshape(())

    ci_scalars = _flatten_scalars(_as_expr_list(ci_block, "ci"))
    ce_scalars = _flatten_scalars(_as_expr_list(ce_block, "ce"))

    counts = (len(ci_scalars), len(ce_scalars))
    if problem._counts is None:
        problem._counts = counts
    elif problem._counts != counts:
        raise ContractError(
            f"constraint counts changed from {problem._counts} to {counts}")

    def grad_row(root) -> np.ndarray:
        grads = tape.backward(root)
        return spec.pack(grads)

    n = spec.size
    rec = EvalRecord(
        x=np.array(x, dtype=float, copy=True),
        f=float(f_expr.value),
        grad_f=grad_row(f_expr),
        ci=np.array([float(e.value) for e in ci_scalars]),
        ci_jac=(np.vstack([grad_row(e) for e in ci_scalars])
                if ci_scalars else np.zeros((0, n))),
        ce=np.array([float(e.value) for e in ce_scalars]),
        ce_jac=(np.vstack([grad_row(e) for e in ce_scalars])
                if ce_scalars else np.zeros((0, n))),
    )
    for arr in (rec.f, rec.grad_f, rec.ci, rec.ci_jac, rec.ce, rec.ce_jac):
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite value in evaluation", iterate=x)
    return rec
