"""Quasi-Newton exact-penalty driver for nonsmooth constrained problems.

The driver minimizes the penalty function

    phi(x; mu) = mu * f(x) + v(x),
    v(x) = sum_i max(ci(x), 0) + sum_e |ce(x)|

with BFGS curvature estimates. Each iteration measures stationarity as the
smallest norm over the convex hull of recently accepted penalty gradients,
computes a search direction from the penalty-model QP, adaptively lowers
``mu`` when the direction does not promise enough feasibility progress
(steering), takes a weak-Wolfe step, and updates the inverse Hessian.
``mu`` never increases; the gradient cache is flushed whenever it changes
because gradients of different penalties are not comparable.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, QPSolveError
from .problem import (EvalRecord, ProblemDefinition, evaluate,
                      evaluate_penalty)
from .qp import min_norm_in_hull, steering_direction

# the steering QPs feed a line search; solving them beyond this accuracy
# buys nothing and grinds on ill-conditioned curvature
_STEER_TOL = 1e-8
_STEER_MAX_ITER = 600

__all__ = ["SolverOptions", "Solution", "IterateRecord", "TerminationCode",
           "solve", "bfgs_update", "weak_wolfe_linesearch",
           "assemble_penalty_gradient", "penalty_value",
           "DenseInverseHessian", "LbfgsInverseHessian"]


class TerminationCode(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    LINESEARCH_FAILED = "LineSearchFailed"
    STATIONARY_INFEASIBLE = "StationaryInfeasible"
    NUMERICAL_ERROR = "NumericalError"


@dataclass
class SolverOptions:
    """Tunable constants of the penalty driver.

    ``x0`` may be a packed vector or a dict of named arrays; when absent
    the start point is standard normal drawn from ``seed``.
    ``gradient_cache_size`` defaults to ``min(50, n + 10)``.
    ``limited_memory_pairs = 0`` keeps a dense inverse Hessian.
    ``stationarity_radius`` restricts the gradient hull to cached iterates
    within that (relative) distance of the current point; sampling far-away
    gradients would fake cancellation.
    """

    opt_tol: float = 1e-8
    viol_ineq_tol: float = 1e-8
    viol_eq_tol: float = 1e-8
    max_iter: int = 1000
    mu0: float = 1.0
    mu_min: float = 1e-4
    steering_c_v: float = 0.1
    steering_c_mu: float = 0.5
    steering_max_trials: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.5
    linesearch_max_bisections: int = 50
    gradient_cache_size: int | None = None
    limited_memory_pairs: int = 0
    stationarity_radius: float = 1e-4
    seed: int = 0
    x0: object | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if not (0.0 < self.steering_c_v < 1.0):
            raise ValueError("need 0 < steering_c_v < 1")
        if not (0.0 < self.steering_c_mu < 1.0):
            raise ValueError("need 0 < steering_c_mu < 1")
        for name in ("opt_tol", "viol_ineq_tol", "viol_eq_tol", "mu0"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.mu_min <= self.mu0:
            raise ValueError("need 0 < mu_min <= mu0")
        if self.max_iter < 1 or self.steering_max_trials < 0:
            raise ValueError("iteration budgets must be positive")
        if self.limited_memory_pairs < 0:
            raise ValueError("limited_memory_pairs must be >= 0")
        if self.stationarity_radius <= 0.0:
            raise ValueError("stationarity_radius must be positive")


@dataclass
class IterateRecord:
    iter: int
    mu: float
    phi: float
    f: float
    viol_ineq: float
    viol_eq: float
    stationarity: float
    step: float
    qp_status: str


@dataclass
class Solution:
    """Best point found plus enough context to re-check the verdict."""

    variables: dict
    x: np.ndarray
    f: float
    max_violation: float
    stationarity: float
    stationarity_scale: float
    status: TerminationCode
    log: list
    wall_time: float
    options: SolverOptions

    @property
    def iterations(self) -> int:
        return len(self.log)


# ---------------------------------------------------------------------------
# penalty assembly


def penalty_value(rec: EvalRecord, mu: float) -> float:
    return mu * rec.f + rec.violation_l1


def assemble_penalty_gradient(rec: EvalRecord, mu: float) -> np.ndarray:
    """Gradient of the penalty: active inequalities and signed equalities.

    Inactive (c <= 0) inequalities contribute nothing; sign(0) = 0 for
    equalities, matching the fixed subgradient selections of the tape.
    """
    g = mu * rec.grad_f
    if rec.ci.size:
        g = g + rec.ci_jac.T @ (rec.ci > 0.0).astype(float)
    if rec.ce.size:
        g = g + rec.ce_jac.T @ np.sign(rec.ce)
    return g


_KINK_TOL = 1e-12


def penalty_directional_derivative(rec: EvalRecord, mu: float,
                                   d: np.ndarray) -> float:
    """Exact one-sided derivative of the penalty along ``d``.

    The fixed-selection gradient is blind to constraints sitting exactly on
    their kink; a descent test built on it can claim descent into a wall.
    Here boundary terms contribute their one-sided rates instead.
    """
    val = mu * float(rec.grad_f @ d)
    if rec.ci.size:
        rates = rec.ci_jac @ d
        active = rec.ci > _KINK_TOL
        boundary = np.abs(rec.ci) <= _KINK_TOL
        val += float(rates[active].sum())
        val += float(np.clip(rates[boundary], 0.0, None).sum())
    if rec.ce.size:
        rates = rec.ce_jac @ d
        off = np.abs(rec.ce) > _KINK_TOL
        val += float((np.sign(rec.ce[off]) * rates[off]).sum())
        val += float(np.abs(rates[~off]).sum())
    return val


# ---------------------------------------------------------------------------
# inverse-Hessian approximations


def bfgs_update(H: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Standard inverse-BFGS update; skipped when s'y is not safely positive."""
    s = np.asarray(s, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    sy = float(s @ y)
    if sy <= 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
        return np.array(H, copy=True)
    rho = 1.0 / sy
    V = np.eye(len(s)) - rho * np.outer(s, y)
    Hn = V @ H @ V.T + rho * np.outer(s, s)
    return 0.5 * (Hn + Hn.T)


class DenseInverseHessian:
    def __init__(self, n: int) -> None:
        self.n = n
        self.H = np.eye(n)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.H @ v

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        self.H = bfgs_update(self.H, s, y)

    def reset(self) -> None:
        self.H = np.eye(self.n)

    def dense(self) -> np.ndarray:
        return self.H


class LbfgsInverseHessian:
    """Limited-memory variant: a ring of (s, y) pairs, two-loop recursion."""

    def __init__(self, n: int, max_pairs: int) -> None:
        self.n = n
        self.max_pairs = max_pairs
        self.pairs: list[tuple[np.ndarray, np.ndarray, float]] = []

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        s = np.asarray(s, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        sy = float(s @ y)
        if sy <= 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            return
        self.pairs.append((s.copy(), y.copy(), 1.0 / sy))
        if len(self.pairs) > self.max_pairs:
            self.pairs.pop(0)

    def _gamma(self) -> float:
        if not self.pairs:
            return 1.0
        s, y, _ = self.pairs[-1]
        return float(s @ y) / float(y @ y)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        q = np.array(v, dtype=float)
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        q *= self._gamma()
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return q

    def reset(self) -> None:
        self.pairs = []

    def dense(self) -> np.ndarray:
        return np.column_stack([self.matvec(e) for e in np.eye(self.n)])


# ---------------------------------------------------------------------------
# weak-Wolfe line search


@dataclass
class LineSearchResult:
    ok: bool
    t: float
    x: np.ndarray | None
    phi: float
    grad: np.ndarray | None
    payload: object
    evals: int
    saw_finite: bool = True


def weak_wolfe_linesearch(evaluator: Callable, x: np.ndarray, d: np.ndarray,
                          phi0: float, dirder0: float, c1: float, c2: float,
                          max_bisections: int,
                          t_max: float = np.inf) -> LineSearchResult:
    """Bracketing weak-Wolfe search: doubling then bisection from t = 1.

    ``evaluator(x_trial) -> (phi, grad_phi, payload)``; a trial that raises
    :class:`NumericalError` counts as an overlong step. ``t_max`` bounds the
    step (penalty functions of nonconvex problems can be unbounded below
    along a ray, and chasing that ray to infinity helps nobody). On budget
    exhaustion the best point satisfying the sufficient-decrease condition
    (if any) is returned with ``ok=False``.
    """
    lo, hi = 0.0, np.inf
    t = min(1.0, t_max)
    best: LineSearchResult | None = None
    saw_finite = False
    for k in range(1, max_bisections + 1):
        xt = x + t * d
        try:
            phit, gt, payload = evaluator(xt)
            saw_finite = True
            if phit <= -1e50:
                # riding an unbounded-below ray; force the bracket shut
                hi = t
            elif phit <= phi0 + c1 * t * dirder0:
                if best is None or phit < best.phi:
                    best = LineSearchResult(False, t, xt, phit, gt, payload, k)
                if float(gt @ d) >= c2 * dirder0:
                    return LineSearchResult(True, t, xt, phit, gt, payload, k)
                lo = t
            else:
                hi = t
        except NumericalError:
            hi = t
        if lo >= t_max:
            break   # capped step with sufficient decrease: take it
        t = 0.5 * (lo + hi) if np.isfinite(hi) else min(2.0 * t, t_max)
    if best is not None:
        best.evals = max_bisections
        best.saw_finite = True
        return best
    return LineSearchResult(False, 0.0, None, phi0, None, None,
                            max_bisections, saw_finite)


# ---------------------------------------------------------------------------
# driver


class _BestTracker:
    """Feasible point with lowest f if one exists, else lowest violation."""

    def __init__(self, viol_ineq_tol: float, viol_eq_tol: float) -> None:
        self.ti = viol_ineq_tol
        self.te = viol_eq_tol
        self.rec: EvalRecord | None = None
        self.feasible = False

    def offer(self, rec: EvalRecord) -> None:
        feas = rec.viol_ineq_max <= self.ti and rec.viol_eq_max <= self.te
        if self.rec is None:
            self.rec, self.feasible = rec, feas
            return
        if feas:
            if not self.feasible or rec.f < self.rec.f:
                self.rec, self.feasible = rec, True
        elif not self.feasible:
            if rec.violation_l1 < self.rec.violation_l1:
                self.rec = rec


def _initial_point(problem: ProblemDefinition, opts: SolverOptions,
                   rng: np.random.Generator) -> np.ndarray:
    if opts.x0 is None:
        return rng.standard_normal(problem.dim)
    if isinstance(opts.x0, dict):
        return problem.variables.pack(opts.x0)
    x0 = np.asarray(opts.x0, dtype=float).ravel()
    if x0.size != problem.dim:
        raise ValueError(f"x0 has length {x0.size}, expected {problem.dim}")
    return x0


def solve(problem: ProblemDefinition,
          options: SolverOptions | None = None,
          observer: Callable | None = None) -> Solution:
    """Run the penalty BFGS-SQP loop on one problem.

    Deterministic for a fixed (problem, options) pair: the only randomness
    is the seeded start point. ``observer(k, x)`` is called after each
    accepted step (useful for tracing trajectories in tests).
    """
    opts = options if options is not None else SolverOptions()
    n = problem.dim
    rng = np.random.default_rng(opts.seed)
    x = _initial_point(problem, opts, rng)
    ell = opts.gradient_cache_size or min(50, n + 10)
    hess = (LbfgsInverseHessian(n, opts.limited_memory_pairs)
            if opts.limited_memory_pairs > 0 else DenseInverseHessian(n))
    best = _BestTracker(opts.viol_ineq_tol, opts.viol_eq_tol)
    log: list[IterateRecord] = []
    t_start = time.perf_counter()
    mu = opts.mu0

    def finish(status: TerminationCode, stationarity: float,
               scale: float) -> Solution:
        rec = best.rec
        wall = time.perf_counter() - t_start
        if rec is None:
            return Solution({}, np.array(x, copy=True), np.nan, np.nan,
                            stationarity, scale, status, log, wall, opts)
        return Solution(problem.variables.unpack(rec.x), rec.x, rec.f,
                        max(rec.viol_ineq_max, rec.viol_eq_max),
                        stationarity, scale, status, log, wall, opts)

    def pen_eval(point: np.ndarray):
        pe = evaluate_penalty(problem, point, mu)
        return pe.phi, pe.grad_phi, pe

    try:
        rec = evaluate(problem, x)
    except NumericalError:
        return finish(TerminationCode.NUMERICAL_ERROR, np.inf, 1.0)
    best.offer(rec)
    phi = penalty_value(rec, mu)
    gphi = assemble_penalty_gradient(rec, mu)
    scale = max(1.0, float(np.linalg.norm(gphi)))
    cache = [(x.copy(), gphi)]
    consecutive_ls_failures = 0
    consecutive_qp_failures = 0
    steer_skip_until = 0
    measure = np.inf
    status = TerminationCode.MAX_ITER

    for k in range(opts.max_iter):
        # hull of cached gradients sampled near the current point only; at
        # infeasible iterates the gradient norm is reported instead (a
        # conservative upper bound; termination needs feasibility anyway)
        vi, ve = rec.viol_ineq_max, rec.viol_eq_max
        feasible_now = vi <= opts.viol_ineq_tol and ve <= opts.viol_eq_tol
        radius = opts.stationarity_radius * max(1.0, float(np.linalg.norm(x)))
        columns = [g for (pt, g) in cache
                   if np.linalg.norm(pt - x) <= radius]
        if len(columns) == 1 or not feasible_now:
            measure = float(min(np.linalg.norm(g) for g in columns))
        else:
            try:
                measure, _ = min_norm_in_hull(np.column_stack(columns))
            except QPSolveError:
                measure = np.inf

        if measure <= opts.opt_tol * scale and vi <= opts.viol_ineq_tol \
                and ve <= opts.viol_eq_tol:
            log.append(IterateRecord(k, mu, phi, rec.f, vi, ve, measure,
                                     0.0, "none"))
            return finish(TerminationCode.CONVERGED, measure, scale)

        # steering: lower mu until the direction promises enough of the
        # feasibility progress that the pure feasibility step achieves
        qp_tag = "solved"
        constrained = bool(rec.ci.size or rec.ce.size)
        try:
            if k < steer_skip_until:
                # the steering QPs have been failing; do not grind them
                # every iteration, fall back straight away for a while
                raise QPSolveError("steering suspended after failures")
            if constrained:
                infeasible = vi > opts.viol_ineq_tol or ve > opts.viol_eq_tol
                # the feasibility reference QP only matters while infeasible
                pred0 = 0.0
                if infeasible:
                    _, pred0 = steering_direction(
                        hess.dense(), rec.grad_f, rec.ci, rec.ci_jac,
                        rec.ce, rec.ce_jac, 0.0,
                        tol=_STEER_TOL, max_iter=_STEER_MAX_ITER)
                if infeasible and pred0 <= opts.opt_tol * rec.violation_l1:
                    # the feasibility model in the quasi-Newton metric sees
                    # no way to reduce the violation; confirm in the plain
                    # Euclidean metric before giving up (a badly conditioned
                    # metric must not trigger a false verdict)
                    _, pred0_eye = steering_direction(
                        np.eye(n), rec.grad_f, rec.ci, rec.ci_jac,
                        rec.ce, rec.ce_jac, 0.0,
                        tol=_STEER_TOL, max_iter=_STEER_MAX_ITER)
                    if pred0_eye <= opts.opt_tol * rec.violation_l1:
                        log.append(IterateRecord(k, mu, phi, rec.f, vi, ve,
                                                 measure, 0.0, "none"))
                        return finish(TerminationCode.STATIONARY_INFEASIBLE,
                                      measure, scale)
                d, pred = steering_direction(
                    hess.dense(), rec.grad_f, rec.ci, rec.ci_jac,
                    rec.ce, rec.ce_jac, mu,
                    tol=_STEER_TOL, max_iter=_STEER_MAX_ITER)
                # steering lowers mu only while the iterate is infeasible:
                # that is what the penalty parameter is for, and lowering it
                # at feasible points just starves objective progress.
                # tolerance on the comparison: the QP reports the linearized
                # violation only to its own accuracy
                slack = 1e-6 * max(1.0, rec.violation_l1)
                trials = 0
                while infeasible \
                        and pred < opts.steering_c_v * pred0 - slack \
                        and trials < opts.steering_max_trials \
                        and mu > opts.mu_min:
                    mu = max(mu * opts.steering_c_mu, opts.mu_min)
                    trials += 1
                    d, pred = steering_direction(
                        hess.dense(), rec.grad_f, rec.ci, rec.ci_jac,
                        rec.ce, rec.ce_jac, mu,
                        tol=_STEER_TOL, max_iter=_STEER_MAX_ITER)
                if trials:
                    # new penalty: same point, new phi and gradient, and the
                    # cached gradients are no longer comparable
                    phi = penalty_value(rec, mu)
                    gphi = assemble_penalty_gradient(rec, mu)
                    cache = [(x.copy(), gphi)]
            else:
                d = -mu * hess.matvec(rec.grad_f)
        except QPSolveError:
            qp_tag = "fallback"
            d = -hess.matvec(gphi)
            if k >= steer_skip_until:
                consecutive_qp_failures += 1
                if consecutive_qp_failures >= 2:
                    steer_skip_until = k + 8
                    consecutive_qp_failures = 0
        else:
            if k >= steer_skip_until:
                consecutive_qp_failures = 0

        dirder = penalty_directional_derivative(rec, mu, d)
        if not dirder < 0.0:
            hess.reset()
            d = -gphi
            dirder = penalty_directional_derivative(rec, mu, d)
            if not dirder < 0.0:
                # zero penalty gradient but not converged: give up cleanly
                log.append(IterateRecord(k, mu, phi, rec.f, vi, ve, measure,
                                         0.0, qp_tag))
                return finish(TerminationCode.LINESEARCH_FAILED, measure,
                              scale)

        t_cap = 1e3 * max(1.0, float(np.linalg.norm(x))) \
            / max(float(np.linalg.norm(d)), 1e-300)
        ls = weak_wolfe_linesearch(pen_eval, x, d, phi, dirder,
                                   opts.wolfe_c1, opts.wolfe_c2,
                                   opts.linesearch_max_bisections,
                                   t_max=t_cap)
        if not ls.ok and not ls.saw_finite:
            log.append(IterateRecord(k, mu, phi, rec.f, vi, ve, measure,
                                     0.0, qp_tag))
            return finish(TerminationCode.NUMERICAL_ERROR, measure, scale)

        if ls.x is None:
            # not even sufficient decrease within the budget: hard failure;
            # one identity reset is allowed before giving up for good
            consecutive_ls_failures += 1
            if consecutive_ls_failures >= 2:
                log.append(IterateRecord(k, mu, phi, rec.f, vi, ve, measure,
                                         0.0, qp_tag))
                return finish(TerminationCode.LINESEARCH_FAILED, measure,
                              scale)
            hess.reset()
            log.append(IterateRecord(k, mu, phi, rec.f, vi, ve, measure,
                                     0.0, qp_tag))
            continue
        consecutive_ls_failures = 0

        try:
            new_rec = evaluate(problem, ls.x)
        except NumericalError:
            log.append(IterateRecord(k, mu, phi, rec.f, vi, ve, measure,
                                     float(ls.t), qp_tag))
            return finish(TerminationCode.NUMERICAL_ERROR, measure, scale)
        new_gphi = assemble_penalty_gradient(new_rec, mu)
        s = ls.x - x
        y = new_gphi - gphi
        hess.update(s, y)
        x, rec = ls.x, new_rec
        phi, gphi = penalty_value(rec, mu), new_gphi
        best.offer(rec)
        if observer is not None:
            observer(k, x)
        cache.append((x.copy(), gphi))
        if len(cache) > ell:
            cache.pop(0)
        log.append(IterateRecord(k, mu, phi, rec.f, rec.viol_ineq_max,
                                 rec.viol_eq_max, measure, float(ls.t),
                                 qp_tag))

    return finish(TerminationCode.MAX_ITER, measure, scale)
