"""Orthogonally constrained least-squares alignment.

Find ``W`` minimizing ``||W A - B||_F^2`` subject to ``W'W = I`` where
``B = Q A`` for a planted rotation ``Q`` (det +1). The closed-form
optimum ``U V'`` from the SVD of ``B A'`` serves as the oracle; the solver
is given only the raw equality constraints, not the manifold structure.
"""

from __future__ import annotations

import numpy as np

from ..problem import ProblemDefinition, VariableSpec
from . import GalleryExample
from .odl import random_orthogonal

DESCRIPTION = "orthogonally constrained matrix alignment (SVD oracle)"
DEFAULTS = {"n": 5, "seed": 0}


def svd_alignment(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(B @ A.T)
    return U @ Vt


def build_procrustes(n: int, seed: int) -> GalleryExample:
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    Q = random_orthogonal(n, rng)
    if np.linalg.det(Q) < 0.0:
        Q = Q[:, [1, 0] + list(range(2, n))]     # swap two columns: det +1
    B = Q @ A
    eye = np.eye(n)

    def fn(box):
        W = box.W
        resid = W @ A - B
        f = resid.square().sum()
        ce = W.T @ W - eye
        return f, None, ce

    problem = ProblemDefinition(VariableSpec({"W": (n, n)}), fn,
                                name="procrustes")
    w_opt = svd_alignment(A, B)
    return GalleryExample(
        name="procrustes",
        problem=problem,
        oracle={"A": A, "B": B, "Q": Q, "w_opt": w_opt,
                "f_opt": float(np.sum((w_opt @ A - B) ** 2))},
        feasible_point={"W": np.eye(n)},
        config={"n": n, "seed": seed},
    )


def from_config(cfg: dict) -> GalleryExample:
    return build_procrustes(int(cfg["n"]), int(cfg["seed"]))
