"""Two-point boundary problem solved as a constrained fit.

``u(x; theta) = sum_k theta_k sin(k pi x)`` on [0, 1] satisfies the
boundary conditions by construction; the differential equation
``u'' = g`` is enforced as equality constraints at uniform interior
collocation points, using the analytic second derivative of the basis.
The objective is constant in pure mode, or a mean-squared data fit in
supervised mode.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..problem import ProblemDefinition, VariableSpec
from . import GalleryExample

DESCRIPTION = "sine-basis collocation for u'' = g with exact boundary values"
DEFAULTS = {"num_basis": 15, "num_colloc": 30, "source": "quadratic"}

SOURCES: dict[str, tuple[Callable, Callable | None]] = {
    # name -> (g(x), analytic solution or None)
    "zero": (lambda x: np.zeros_like(x), lambda x: np.zeros_like(x)),
    "quadratic": (lambda x: -2.0 * np.ones_like(x), lambda x: x * (1.0 - x)),
    "sine": (lambda x: -np.pi ** 2 * np.sin(np.pi * x),
             lambda x: np.sin(np.pi * x)),
}


def basis_matrix(xs: np.ndarray, num_basis: int) -> np.ndarray:
    k = np.arange(1, num_basis + 1)
    return np.sin(np.pi * np.outer(xs, k))


def second_derivative_matrix(xs: np.ndarray, num_basis: int) -> np.ndarray:
    k = np.arange(1, num_basis + 1)
    return -(k * np.pi) ** 2 * np.sin(np.pi * np.outer(xs, k))


def build_pde(num_basis: int, num_colloc: int, source="quadratic",
              data: tuple[np.ndarray, np.ndarray] | None = None
              ) -> GalleryExample:
    if num_basis < 2:
        raise ValueError("need num_basis >= 2")
    if num_colloc < num_basis:
        raise ValueError("need num_colloc >= num_basis")
    if callable(source):
        g_fn, analytic = source, None
        source_name = getattr(source, "__name__", "custom")
    else:
        if source not in SOURCES:
            raise ValueError(f"unknown source '{source}'")
        g_fn, analytic = SOURCES[source]
        source_name = source
    xs = np.arange(1, num_colloc + 1) / (num_colloc + 1)
    D = second_derivative_matrix(xs, num_basis)
    g_vec = np.asarray(g_fn(xs), dtype=float)

    if data is not None:
        data_x = np.asarray(data[0], dtype=float).ravel()
        data_y = np.asarray(data[1], dtype=float).ravel()
        S_data = basis_matrix(data_x, num_basis)

    def fn(box):
        theta = box.theta
        if data is None:
            f = theta.tape.constant(0.0)
        else:
            f = (S_data @ theta - data_y).square().mean()
        ce = D @ theta - g_vec
        return f, None, ce

    problem = ProblemDefinition(VariableSpec({"theta": (num_basis,)}), fn,
                                name="pde")
    feasible = None
    if data is None:
        if source_name == "zero":
            feasible = {"theta": np.zeros(num_basis)}
        elif source_name == "sine":
            e1 = np.zeros(num_basis)
            e1[0] = 1.0
            feasible = {"theta": e1}
    return GalleryExample(
        name="pde",
        problem=problem,
        oracle={"xs": xs, "second_derivative": D, "g": g_vec,
                "analytic": analytic, "num_basis": num_basis},
        feasible_point=feasible,
        config={"num_basis": num_basis, "num_colloc": num_colloc,
                "source": source_name},
    )


def solution_values(example: GalleryExample, theta: np.ndarray,
                    xs: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the fitted u at points (default: the collocation points)."""
    if xs is None:
        xs = example.oracle["xs"]
    return basis_matrix(np.asarray(xs, dtype=float),
                        example.oracle["num_basis"]) @ np.asarray(theta).ravel()


def from_config(cfg: dict) -> GalleryExample:
    return build_pde(int(cfg["num_basis"]), int(cfg["num_colloc"]),
                     str(cfg["source"]))
