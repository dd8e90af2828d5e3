"""Convex QP subsolver and the two wrappers built on top of it.

The core solver handles

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u           (+-inf bounds allowed)

by ADMM operator splitting: each iteration solves one quasi-definite KKT
system (factored once and reused, refactored when the step-size parameter
``rho`` adapts) followed by a projection onto the box ``[l, u]``. Equality
rows (``l == u``) get a stiffer ``rho``. Periodically the current active
set is polished by a direct KKT solve, which is accepted only when it
passes the optimality check. Everything is dense and deterministic: cold
start at zero, fixed update schedule.

On top of it sit ``min_norm_in_hull`` (smallest-norm point of a convex
hull of gradient columns, used as a stationarity measure) and
``steering_direction`` (the exact-penalty search-direction subproblem with
slack variables for the linearized constraint violations).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import ContractError, QPSolveError

__all__ = ["QPData", "QPSolution", "QPStatus", "solve_qp",
           "min_norm_in_hull", "steering_direction"]

_SIGMA = 1e-6          # primal regularization of the KKT system
_ALPHA = 1.6           # over-relaxation
_RHO0 = 0.1
_RHO_EQ_SCALE = 1e3    # stiffer rho on equality rows
_RHO_PERIOD = 25       # iterations between rho adaptations
_RHO_TRIGGER = 5.0     # adapt only when the residual ratio drifts this far
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_EPS_INF = 1e-6        # relative infeasibility-certificate tolerance
_POLISH_PERIOD = 25    # iterations between direct active-set polish attempts


class QPStatus(enum.Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIter"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


@dataclass
class QPData:
    """One QP instance; ``P`` symmetric PSD, bounds may be infinite."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = np.asarray(self.A, dtype=float).reshape(-1, self.q.size)
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.q.size
        if self.P.shape != (n, n):
            raise ContractError(f"P must be {n}x{n}, got {self.P.shape}")
        m = self.A.shape[0]
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise ContractError("bound vectors must match the row count of A")
        asym = np.max(np.abs(self.P - self.P.T), initial=0.0)
        if asym > 1e-12 * max(1.0, np.max(np.abs(self.P), initial=0.0)):
            raise ContractError(f"P is not symmetric (max asymmetry {asym:g})")
        if np.any(self.l > self.u) or np.any(np.isnan(self.l)) \
                or np.any(np.isnan(self.u)):
            raise ContractError("bounds must satisfy l <= u")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray
    status: QPStatus
    primal_residual: float
    dual_residual: float
    iterations: int


def _project(v: np.ndarray, l: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(v, l), u)


def _residuals(P, q, A, l, u, x, y):
    """Unpolished KKT residuals: stationarity and combined feasibility."""
    m = A.shape[0]
    if m:
        ax = A @ x
        r_dual = float(np.max(np.abs(P @ x + q + A.T @ y), initial=0.0))
        r_comb = float(np.max(np.abs(ax - _project(ax + y, l, u)), initial=0.0))
    else:
        r_dual = float(np.max(np.abs(P @ x + q), initial=0.0))
        r_comb = 0.0
    return r_dual, r_comb


def _solve_kkt(P, A, q, lo, hi, l, u):
    """Equality-constrained solve for one active-set guess.

    The system may be singular (redundant active rows); a quasi-definite
    regularization plus one refinement step keeps it cheap and stable. The
    caller verifies optimality from residuals, so approximation here is
    safe.
    """
    n = q.size
    m = A.shape[0]
    active = lo | hi
    idx = np.flatnonzero(active)
    b = np.where(lo, l, u)[idx]
    k = idx.size
    reg = 1e-11
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = P
    kkt[:n, :n][np.diag_indices(n)] += reg
    if k:
        kkt[:n, n:] = A[idx].T
        kkt[n:, :n] = A[idx]
        kkt[n:, n:][np.diag_indices(k)] -= reg
    rhs = np.concatenate([-q, b])
    try:
        lu = lu_factor(kkt)
        sol = lu_solve(lu, rhs)
        # one refinement step against the unregularized residual
        resid = rhs - kkt @ sol
        resid[:n] += reg * sol[:n]
        resid[n:] -= reg * sol[n:]
        sol = sol + lu_solve(lu, resid)
    except (np.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    x = sol[:n]
    y_full = np.zeros(m)
    y_full[idx] = sol[n:]
    return x, y_full


def _polish(P, q, A, l, u, z, y, tol, max_rounds=6):
    """Active-set refinement seeded by the current ADMM iterate.

    Solves the KKT system for the guessed active set, then repairs the
    guess (add violated rows, drop wrong-signed multipliers) until the
    optimality check passes or the round budget runs out. Returns
    ``(x, y)`` on success, else ``None``.
    """
    n = q.size
    m = A.shape[0]
    if m == 0:
        try:
            x = np.linalg.solve(P + 1e-14 * np.eye(n), -q)
        except np.linalg.LinAlgError:
            return None
        r_dual, _ = _residuals(P, q, A, l, u, x, np.zeros(0))
        return (x, np.zeros(0)) if r_dual <= tol else None

    near = 1e-7
    eq = np.isfinite(l) & np.isfinite(u) & (u - l < 1e-10)
    lo = eq | (np.isfinite(l)
               & ((y < -1e-12) | (np.abs(z - l) <= near * (1.0 + np.abs(l)))))
    hi = ~lo & np.isfinite(u) \
        & ((y > 1e-12) | (np.abs(u - z) <= near * (1.0 + np.abs(u))))

    for _ in range(max_rounds):
        solved = _solve_kkt(P, A, q, lo, hi, l, u)
        if solved is None:
            return None
        x, y_full = solved
        r_dual, r_comb = _residuals(P, q, A, l, u, x, y_full)
        if r_dual <= tol and r_comb <= tol:
            return x, y_full
        ax = A @ x
        new_lo = eq | (np.isfinite(l) & (ax < l - 1e-14)
                       & ~hi) | (lo & ~(y_full > 1e-12))
        new_hi = (np.isfinite(u) & (ax > u + 1e-14) & ~new_lo) \
            | (hi & ~(y_full < -1e-12))
        new_hi &= ~new_lo
        if np.array_equal(new_lo, lo) and np.array_equal(new_hi, hi):
            return None
        lo, hi = new_lo, new_hi
    return None


def solve_qp(data: QPData, tol: float = 1e-9,
             max_iter: int = 20000) -> QPSolution:
    """Solve one QP; SOLVED means the KKT residuals are below ``tol``.

    Optimality check: ``||Px + q + A'y||_inf <= tol`` and
    ``||Ax - proj_[l,u](Ax + y)||_inf <= tol``. Primal/dual infeasibility
    certificates are reported as statuses rather than fabricating answers.
    """
    if tol <= 0.0:
        raise ContractError("tol must be positive")
    n, m = data.n, data.m
    P = 0.5 * (data.P + data.P.T)
    q, A, l, u = data.q, data.A, data.l, data.u

    rho = np.full(m, _RHO0)
    if m:
        rho[(u - l) < 1e-10] = _RHO0 * _RHO_EQ_SCALE

    def factor(rho_vec):
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = P + _SIGMA * np.eye(n)
        if m:
            kkt[:n, n:] = A.T
            kkt[n:, :n] = A
            kkt[n:, n:] = -np.diag(1.0 / rho_vec)
        return lu_factor(kkt)

    lu = factor(rho)
    x = np.zeros(n)
    z = np.zeros(m)
    y = np.zeros(m)

    status = QPStatus.MAX_ITER
    r_prim = r_dual = np.inf
    it = 0
    stall_window = 500
    stall_best = np.inf
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([_SIGMA * x - q, z - y / rho]) if m \
            else _SIGMA * x - q
        sol = lu_solve(lu, rhs)
        x_tilde = sol[:n]
        x_new = _ALPHA * x_tilde + (1.0 - _ALPHA) * x
        if m:
            nu = sol[n:]
            z_tilde = z + (nu - y) / rho
            z_rel = _ALPHA * z_tilde + (1.0 - _ALPHA) * z
            z_new = _project(z_rel + y / rho, l, u)
            y_new = y + rho * (z_rel - z_new)
        else:
            z_new, y_new = z, y

        dx = x_new - x
        dy = y_new - y
        x, z, y = x_new, z_new, y_new

        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))) \
                or np.max(np.abs(x), initial=0.0) > 1e120:
            break   # runaway iterates: report MaxIter rather than garbage

        ax = A @ x if m else np.zeros(0)
        r_dual, r_comb = _residuals(P, q, A, l, u, x, y)
        r_prim = float(np.max(np.abs(ax - z), initial=0.0))
        if r_dual <= tol and r_comb <= tol:
            status = QPStatus.SOLVED
            break

        if it % 10 == 0:
            if m and _primal_infeasibility_certificate(A, l, u, dy):
                status = QPStatus.PRIMAL_INFEASIBLE
                break
            if _dual_infeasibility_certificate(P, q, A, l, u, dx):
                status = QPStatus.DUAL_INFEASIBLE
                break

        if it % _POLISH_PERIOD == 0:
            polished = _polish(P, q, A, l, u, z, y, tol)
            if polished is not None:
                x, y = polished
                r_dual, r_prim = _residuals(P, q, A, l, u, x, y)
                status = QPStatus.SOLVED
                break

        if it % stall_window == 0:
            # no meaningful progress within a window: polish already failed
            # repeatedly, so report MaxIter and let the caller fall back
            current = r_dual + r_comb
            if current > 0.9 * stall_best:
                break
            stall_best = min(stall_best, current)

        if it % _RHO_PERIOD == 0 and m:
            scale_p = max(np.max(np.abs(ax), initial=0.0),
                          np.max(np.abs(z), initial=0.0), 1e-10)
            scale_d = max(np.max(np.abs(P @ x), initial=0.0),
                          np.max(np.abs(A.T @ y), initial=0.0),
                          np.max(np.abs(q), initial=0.0), 1e-10)
            ratio = np.sqrt((r_prim / scale_p) / max(r_dual / scale_d, 1e-16))
            if ratio > _RHO_TRIGGER or ratio < 1.0 / _RHO_TRIGGER:
                rho = np.clip(rho * ratio, _RHO_MIN, _RHO_MAX)
                lu = factor(rho)

    if status is QPStatus.MAX_ITER:
        polished = _polish(P, q, A, l, u, z, y, tol)
        if polished is not None:
            x, y = polished
            r_dual, r_prim = _residuals(P, q, A, l, u, x, y)
            status = QPStatus.SOLVED

    return QPSolution(x=x, y=y, status=status, primal_residual=r_prim,
                      dual_residual=r_dual, iterations=it)


def _primal_infeasibility_certificate(A, l, u, dy) -> bool:
    norm_dy = np.max(np.abs(dy), initial=0.0)
    if norm_dy <= 1e-14:
        return False
    if np.max(np.abs(A.T @ dy), initial=0.0) > _EPS_INF * norm_dy:
        return False
    dy_pos = np.clip(dy, 0.0, None)
    dy_neg = np.clip(dy, None, 0.0)
    # an unbounded bound cannot support a nonzero multiplier of that sign
    if np.any(dy_pos[np.isinf(u)] > 1e-14 * norm_dy) \
            or np.any(-dy_neg[np.isinf(l)] > 1e-14 * norm_dy):
        return False
    support = float(np.sum(u[np.isfinite(u)] * dy_pos[np.isfinite(u)])
                    + np.sum(l[np.isfinite(l)] * dy_neg[np.isfinite(l)]))
    return support < -_EPS_INF * norm_dy


def _dual_infeasibility_certificate(P, q, A, l, u, dx) -> bool:
    norm_dx = np.max(np.abs(dx), initial=0.0)
    if norm_dx <= 1e-14:
        return False
    if np.max(np.abs(P @ dx), initial=0.0) > _EPS_INF * norm_dx:
        return False
    if float(q @ dx) > -_EPS_INF * norm_dx:
        return False
    if A.shape[0]:
        adx = A @ dx
        if np.any(adx[np.isfinite(u)] > _EPS_INF * norm_dx) \
                or np.any(adx[np.isfinite(l)] < -_EPS_INF * norm_dx):
            return False
    return True


def min_norm_in_hull(G: np.ndarray, tol: float = 1e-9,
                     max_iter: int = 20000) -> tuple[float, np.ndarray]:
    """Smallest 2-norm over the convex hull of the columns of ``G``.

    Returns ``(measure, weights)`` with the weights on the simplex. Raises
    :class:`QPSolveError` if the underlying QP does not solve; callers
    treat that as "measure unknown".
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[1] < 1:
        raise ContractError("G must be an n x k matrix with k >= 1")
    k = G.shape[1]
    # normalize the column scale so the QP is well conditioned; the simplex
    # weights are invariant under uniform scaling of G
    scale = max(1e-300, float(np.max(np.abs(G), initial=0.0)))
    Gs = G / scale
    P = Gs.T @ Gs
    P = 0.5 * (P + P.T)
    A = np.vstack([np.ones((1, k)), np.eye(k)])
    l = np.concatenate([[1.0], np.zeros(k)])
    u = np.concatenate([[1.0], np.full(k, np.inf)])
    sol = solve_qp(QPData(P, np.zeros(k), A, l, u), tol=tol,
                   max_iter=max_iter)
    if sol.status is not QPStatus.SOLVED:
        raise QPSolveError("min-norm hull QP failed", sol.status.value)
    lam = np.clip(sol.x, 0.0, None)
    total = lam.sum()
    if total < 0.5:
        raise QPSolveError("hull weights collapsed", sol.status.value)
    lam = lam / total
    return float(np.linalg.norm(G @ lam)), lam


def linearized_violation(d: np.ndarray, ci: np.ndarray, ci_jac: np.ndarray,
                         ce: np.ndarray, ce_jac: np.ndarray) -> float:
    """Total violation of the constraint linearizations at step ``d``."""
    vi = float(np.clip(ci + ci_jac @ d, 0.0, None).sum()) if ci.size else 0.0
    ve = float(np.abs(ce + ce_jac @ d).sum()) if ce.size else 0.0
    return vi + ve


def steering_direction(H: np.ndarray, grad_f: np.ndarray,
                       ci: np.ndarray, ci_jac: np.ndarray,
                       ce: np.ndarray, ce_jac: np.ndarray,
                       mu: float, tol: float = 1e-9,
                       max_iter: int = 20000) -> tuple[np.ndarray, float]:
    """Search direction of the penalty model at penalty weight ``mu``.

    Solves

        min_d  mu * grad_f'd + 0.5 d'Bd
               + sum_i max(ci + Ji d, 0) + sum_e |ce + Je d|

    with ``B`` the inverse of the quasi-Newton matrix ``H``, written with
    slack variables and handed to :func:`solve_qp`. Returns the direction
    and the predicted violation reduction ``v(x) - v_lin(d)``.
    """
    H = np.asarray(H, dtype=float)
    grad_f = np.asarray(grad_f, dtype=float).ravel()
    n = grad_f.size
    ci = np.asarray(ci, dtype=float).ravel()
    ce = np.asarray(ce, dtype=float).ravel()
    p, qe = ci.size, ce.size
    ci_jac = np.asarray(ci_jac, dtype=float).reshape(p, n)
    ce_jac = np.asarray(ce_jac, dtype=float).reshape(qe, n)
    if mu < 0.0:
        raise ContractError("mu must be nonnegative")

    if p == 0 and qe == 0:
        # pure quasi-Newton model: exact minimizer, no QP needed
        return -mu * (H @ grad_f), 0.0

    try:
        B = np.linalg.solve(H, np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise QPSolveError("quasi-Newton matrix is singular") from exc
    B = 0.5 * (B + B.T)

    # substitute z = c * z_hat (keeps variables O(1) when the quasi-Newton
    # step is huge) and divide the objective by c^2 * s (keeps the curvature
    # block O(1) when H is ill-conditioned); the minimizer maps back exactly
    c = max(1.0, mu * float(np.max(np.abs(H @ grad_f), initial=0.0)))
    s = max(1.0, float(np.max(np.abs(B))))
    nv = n + p + qe
    P = np.zeros((nv, nv))
    P[:n, :n] = B / s
    qvec = np.concatenate([mu * grad_f, np.ones(p), np.ones(qe)]) / (c * s)

    rows = []
    lows = []
    ups = []
    if p:
        R = np.zeros((p, nv))
        R[:, :n] = ci_jac
        R[:, n:n + p] = -np.eye(p)
        rows.append(R)                       # Ji d - s <= -ci
        lows.append(np.full(p, -np.inf))
        ups.append(-ci)
        R2 = np.zeros((p, nv))
        R2[:, n:n + p] = np.eye(p)           # s >= 0
        rows.append(R2)
        lows.append(np.zeros(p))
        ups.append(np.full(p, np.inf))
    if qe:
        R3 = np.zeros((qe, nv))
        R3[:, :n] = ce_jac
        R3[:, n + p:] = -np.eye(qe)          # Je d - t <= -ce
        rows.append(R3)
        lows.append(np.full(qe, -np.inf))
        ups.append(-ce)
        R4 = np.zeros((qe, nv))
        R4[:, :n] = ce_jac
        R4[:, n + p:] = np.eye(qe)           # Je d + t >= -ce
        rows.append(R4)
        lows.append(-ce)
        ups.append(np.full(qe, np.inf))

    data = QPData(P, qvec, np.vstack(rows), np.concatenate(lows) / c,
                  np.concatenate(ups) / c)
    sol = solve_qp(data, tol=tol, max_iter=max_iter)
    if sol.status is not QPStatus.SOLVED:
        raise QPSolveError("steering QP failed", sol.status.value)
    d = c * sol.x[:n]
    v_here = float(np.clip(ci, 0.0, None).sum() + np.abs(ce).sum())
    predicted = v_here - linearized_violation(d, ci, ci_jac, ce, ce_jac)
    return d, predicted
