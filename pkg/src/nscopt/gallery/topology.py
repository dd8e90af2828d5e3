"""Compliance minimization on a serial spring chain.

``d`` springs hang off a wall; design fractions ``x`` in [0, 1]^d set each
stiffness ``k_i = k_min + x_i (k_max - k_min)``. Both the design ``x`` and
the displacement ``u`` are decision variables, coupled by the equilibrium
equalities ``K(x) u = f``; material is limited by ``sum(x) <= v0 d``.

With ``dip=True`` the design is reparametrized as the sigmoid output of a
small fixed-input ReLU network and the network weights become the design
variables; the constraint structure is unchanged.
"""

from __future__ import annotations

import numpy as np

from ..problem import ProblemDefinition, VariableSpec
from . import GalleryExample

DESCRIPTION = "spring-chain compliance with equilibrium + volume constraints"
DEFAULTS = {"d": 10, "v0": 0.5, "k_min": 1.0, "k_max": 10.0, "dip": False,
            "seed": 0}

_DIP_HIDDEN = 4
_DIP_LATENT = 3


def element_matrices(d: int) -> list[np.ndarray]:
    """Per-spring stiffness patterns for a chain anchored at node 0."""
    mats = []
    for i in range(d):
        E = np.zeros((d, d))
        if i == 0:
            E[0, 0] = 1.0
        else:
            E[i - 1, i - 1] = 1.0
            E[i, i] = 1.0
            E[i - 1, i] = -1.0
            E[i, i - 1] = -1.0
        mats.append(E)
    return mats


def stiffness_np(x: np.ndarray, k_min: float, k_max: float) -> np.ndarray:
    d = len(x)
    K = np.zeros((d, d))
    for E, xi in zip(element_matrices(d), x):
        K += (k_min + xi * (k_max - k_min)) * E
    return K


def build_topology(d: int, v0: float, k_min: float, k_max: float,
                   load: np.ndarray | None = None, dip: bool = False,
                   seed: int = 0) -> GalleryExample:
    if d < 2:
        raise ValueError("need d >= 2")
    if not 0.0 < k_min < k_max:
        raise ValueError("need 0 < k_min < k_max")
    if not 0.0 < v0 <= 1.0:
        raise ValueError("need 0 < v0 <= 1")
    if load is None:
        load = np.zeros(d)
        load[-1] = 1.0
    load = np.asarray(load, dtype=float)
    mats = element_matrices(d)
    rng = np.random.default_rng(seed)

    def equilibrium_rows(x_expr, u_expr):
        ku = None
        for i, E in enumerate(mats):
            term = (x_expr[i] * (k_max - k_min) + k_min) * (E @ u_expr)
            ku = term if ku is None else ku + term
        return ku

    if not dip:
        def fn(box):
            x, u = box.x, box.u
            ku = equilibrium_rows(x, u)
            f = u.dot(ku)
            ci = [x.sum() - v0 * d, -x, x - 1.0]
            ce = ku - load
            return f, ci, ce

        variables = VariableSpec([("x", (d,)), ("u", (d,))])
        x_feas = np.full(d, v0)
        u_feas = np.linalg.solve(stiffness_np(x_feas, k_min, k_max), load)
        feasible = {"x": x_feas, "u": u_feas}
        dip_data = None
    else:
        beta = rng.normal(size=_DIP_LATENT)
        feas_weights = {
            "W1": 0.3 * rng.normal(size=(_DIP_HIDDEN, _DIP_LATENT)),
            "b1": 0.1 * rng.normal(size=_DIP_HIDDEN),
            "W2": 0.3 * rng.normal(size=(d, _DIP_HIDDEN)),
            "b2": np.full(d, -5.0),      # sigmoid ~ 0: tiny volume, feasible
        }

        def design(box):
            h = (box.W1 @ beta + box.b1).relu()
            t = box.W2 @ h + box.b2
            return 1.0 / ((-t).exp() + 1.0)

        def fn(box):
            x = design(box)
            u = box.u
            ku = equilibrium_rows(x, u)
            f = u.dot(ku)
            ci = [x.sum() - v0 * d, -x, x - 1.0]
            ce = ku - load
            return f, ci, ce

        variables = VariableSpec([
            ("W1", (_DIP_HIDDEN, _DIP_LATENT)), ("b1", (_DIP_HIDDEN,)),
            ("W2", (d, _DIP_HIDDEN)), ("b2", (d,)), ("u", (d,)),
        ])
        h = np.maximum(feas_weights["W1"] @ beta + feas_weights["b1"], 0.0)
        x_feas = 1.0 / (1.0 + np.exp(-(feas_weights["W2"] @ h
                                       + feas_weights["b2"])))
        u_feas = np.linalg.solve(stiffness_np(x_feas, k_min, k_max), load)
        feasible = dict(feas_weights, u=u_feas)
        dip_data = {"beta": beta}

    problem = ProblemDefinition(variables, fn, name="topology")
    return GalleryExample(
        name="topology",
        problem=problem,
        oracle={"load": load, "k_min": k_min, "k_max": k_max, "v0": v0,
                "d": d, "dip": dip_data},
        feasible_point=feasible,
        config={"d": d, "v0": v0, "k_min": k_min, "k_max": k_max,
                "dip": dip, "seed": seed},
    )


def compliance_grid_oracle(example: GalleryExample,
                           resolution: float = 1e-2) -> float:
    """Exhaustive design grid with exact equilibrium solves (small d only)."""
    o = example.oracle
    d, v0 = o["d"], o["v0"]
    load = o["load"]
    ticks = np.arange(0.0, 1.0 + resolution / 2, resolution)
    grids = np.meshgrid(*([ticks] * d), indexing="ij")
    designs = np.stack([g.ravel() for g in grids], axis=1)
    designs = designs[designs.sum(axis=1) <= v0 * d + 1e-12]
    best = np.inf
    for x in designs:
        K = stiffness_np(x, o["k_min"], o["k_max"])
        u = np.linalg.solve(K, load)
        best = min(best, float(load @ u))
    return best


def from_config(cfg: dict) -> GalleryExample:
    return build_topology(int(cfg["d"]), float(cfg["v0"]),
                          float(cfg["k_min"]), float(cfg["k_max"]),
                          dip=bool(cfg["dip"]), seed=int(cfg["seed"]))
