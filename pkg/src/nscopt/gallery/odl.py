"""Sparsifying-direction recovery on the unit sphere.

Data is ``Y = A X`` with ``A`` a random orthogonal basis and ``X`` sparse
Gaussian. Minimizing ``1/m * ||q'Y||_1`` subject to ``q'q = 1`` recovers a
signed column of ``A``: along a basis column the product ``q'Y`` is one
sparse row of ``X``, which has the smallest l1 mass.
"""

from __future__ import annotations

import math

import numpy as np

from ..problem import ProblemDefinition, VariableSpec
from . import GalleryExample

DESCRIPTION = "sparse dictionary direction on the unit sphere (l1 objective)"
DEFAULTS = {"n": 10, "m": 300, "sparsity": 0.3, "seed": 0}


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish orthogonal matrix with a deterministic sign convention."""
    Q, R = np.linalg.qr(rng.normal(size=(n, n)))
    return Q * np.sign(np.diag(R))


def build_odl(n: int, m: int, sparsity: float, seed: int,
              basis: np.ndarray | None = None) -> GalleryExample:
    if n < 2:
        raise ValueError("need n >= 2")
    if not 0.0 < sparsity <= 0.5:
        raise ValueError("sparsity must lie in (0, 0.5]")
    if m < 10.0 * n * math.log(n):
        raise ValueError(f"need m >= 10 n log n (= {10.0 * n * math.log(n):.0f})")
    rng = np.random.default_rng(seed)
    A = random_orthogonal(n, rng) if basis is None else np.asarray(basis, dtype=float)
    X = rng.normal(size=(n, m)) * (rng.random(size=(n, m)) < sparsity)
    Y = A @ X

    def fn(box):
        q = box.q
        f = (q.T @ Y).norm(1) * (1.0 / m)
        ce = q.T @ q - 1.0
        return f, None, ce

    problem = ProblemDefinition(VariableSpec({"q": (n, 1)}), fn, name="odl")
    return GalleryExample(
        name="odl",
        problem=problem,
        oracle={"basis": A, "coeffs": X, "data": Y},
        feasible_point={"q": A[:, :1].copy()},
        config={"n": n, "m": m, "sparsity": sparsity, "seed": seed},
    )


def recovery_score(example: GalleryExample, q: np.ndarray) -> float:
    """max_j |q' a_j| over the stored basis columns; 1 means recovered."""
    A = example.oracle["basis"]
    return float(np.max(np.abs(A.T @ np.asarray(q).ravel())))


def from_config(cfg: dict) -> GalleryExample:
    return build_odl(int(cfg["n"]), int(cfg["m"]), float(cfg["sparsity"]),
                     int(cfg["seed"]))
