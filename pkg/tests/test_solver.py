"""Solver-core tests: BFGS updates, line search, penalty assembly, solve."""

import numpy as np
import pytest

import nscopt.solver as solver_mod
from nscopt.problem import (ProblemDefinition, VariableSpec, evaluate,
                            evaluate_penalty)
from nscopt.solver import (DenseInverseHessian, LbfgsInverseHessian,
                           SolverOptions, TerminationCode,
                           assemble_penalty_gradient, bfgs_update,
                           penalty_value, solve, weak_wolfe_linesearch)

from test_autodiff import central_diff

# ---------------------------------------------------------------------------
# oracles


def textbook_bfgs(fg, x0, iters, c1=1e-4, c2=0.5, max_bisections=50):
    """Plain BFGS with a weak-Wolfe bracketing search, coded from scratch."""
    n = x0.size
    H = np.eye(n)
    x = np.array(x0, dtype=float)
    path = [x.copy()]
    for _ in range(iters):
        fx, g = fg(x)
        d = -H @ g
        dirder = float(g @ d)
        lo, hi, t = 0.0, np.inf, 1.0
        accepted = None
        for _ in range(max_bisections):
            xt = x + t * d
            ft, gt = fg(xt)
            if ft > fx + c1 * t * dirder:
                hi = t
            elif float(gt @ d) < c2 * dirder:
                lo = t
            else:
                accepted = (xt, gt)
                break
            t = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * t
        assert accepted is not None
        xt, gt = accepted
        s = xt - x
        y = gt - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
            H = 0.5 * (H + H.T)
        x = xt
        path.append(x.copy())
    return path


def quadratic_problem(a):
    a = np.asarray(a, dtype=float)

    def fn(box):
        diff = box.x - a
        return diff.dot(diff), None, None

    return ProblemDefinition(VariableSpec({"x": (a.size,)}), fn)


def general_quadratic_problem(Q, a):
    def fn(box):
        diff = box.x - a
        return diff.dot((Q @ diff)) * 0.5, None, None

    return ProblemDefinition(VariableSpec({"x": (a.size,)}), fn)


# ---------------------------------------------------------------------------
# bfgs_update


def test_bfgs_update_identity_fixed_point():
    e1 = np.array([1.0, 0.0])
    H = bfgs_update(np.eye(2), e1, e1)
    assert np.allclose(H, np.eye(2), atol=1e-15)


def test_bfgs_update_direct_formula_and_secant():
    H = bfgs_update(np.eye(2), np.array([0.0, 1.0]), np.array([0.0, 2.0]))
    assert np.allclose(H, np.diag([1.0, 0.5]), atol=1e-15)
    assert np.allclose(H @ np.array([0.0, 2.0]), [0.0, 1.0], atol=1e-15)


def test_bfgs_update_skips_degenerate_pairs():
    H0 = np.diag([2.0, 3.0])
    H = bfgs_update(H0, np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert np.array_equal(H, H0)


def test_bfgs_update_secant_identity_random():
    rng = np.random.default_rng(12)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        M = rng.normal(size=(n, n))
        H = M @ M.T + np.eye(n)
        s = rng.normal(size=n)
        y = rng.normal(size=n)
        if float(s @ y) <= 1e-8:
            y = s + 0.1 * y if float(s @ (s + 0.1 * y)) > 1e-8 else s
        Hn = bfgs_update(H, s, y)
        assert np.max(np.abs(Hn @ y - s)) <= 1e-10 * max(1.0, np.abs(s).max())
        assert np.max(np.abs(Hn - Hn.T)) <= 1e-12
        assert np.min(np.linalg.eigvalsh(Hn)) > 0.0


def test_lbfgs_two_loop_matches_dense_chain():
    rng = np.random.default_rng(3)
    n = 5
    dense = DenseInverseHessian(n)
    lbfgs = LbfgsInverseHessian(n, max_pairs=100)
    pairs = []
    for _ in range(4):
        s = rng.normal(size=n)
        y = s + 0.3 * rng.normal(size=n)
        if float(s @ y) <= 1e-8:
            continue
        pairs.append((s, y))
        lbfgs.update(s, y)
    # dense chain seeded at gamma * I, the same base the two-loop uses
    s0, y0 = pairs[-1]
    H = (float(pairs[-1][0] @ pairs[-1][1]) / float(pairs[-1][1] @ pairs[-1][1])) * np.eye(n)
    for s, y in pairs:
        H = bfgs_update(H, s, y)
    v = rng.normal(size=n)
    assert np.allclose(lbfgs.matvec(v), H @ v, atol=1e-10)


# ---------------------------------------------------------------------------
# weak-Wolfe line search


def _scalar_evaluator(f, g):
    def ev(x):
        xx = float(x[0])
        return f(xx), np.array([g(xx)]), None
    return ev


def test_linesearch_accepts_unit_step_on_parabola():
    ev = _scalar_evaluator(lambda x: x * x, lambda x: 2.0 * x)
    res = weak_wolfe_linesearch(ev, np.array([1.0]), np.array([-1.0]),
                                1.0, -2.0, 1e-4, 0.5, 50)
    assert res.ok and res.t == 1.0


def test_linesearch_handles_kink_crossing():
    ev = _scalar_evaluator(abs, np.sign)
    res = weak_wolfe_linesearch(ev, np.array([1.0]), np.array([-1.0]),
                                1.0, -1.0, 1e-4, 0.5, 50)
    assert res.ok
    # both conditions verified directly
    t = res.t
    assert abs(1.0 - t) <= 1.0 + 1e-4 * t * (-1.0)
    assert np.sign(1.0 - t) * (-1.0) >= 0.5 * (-1.0)


def test_linesearch_on_random_convex_piecewise_quadratics():
    rng = np.random.default_rng(77)
    c1, c2 = 1e-4, 0.5
    for _ in range(100):
        quad = float(rng.uniform(0.1, 2.0))
        kinks = rng.uniform(-2.0, 2.0, size=3)
        weights = rng.uniform(0.1, 1.0, size=3)

        def f(x):
            return 0.5 * quad * x * x + float(weights @ np.abs(x - kinks))

        def g(x):
            return quad * x + float(weights @ np.sign(x - kinks))

        x0 = float(rng.uniform(-3.0, 3.0))
        g0 = g(x0)
        if abs(g0) < 1e-10:
            continue
        d = -np.sign(g0)
        dirder = g0 * d
        res = weak_wolfe_linesearch(_scalar_evaluator(f, g), np.array([x0]),
                                    np.array([d]), f(x0), dirder, c1, c2, 50)
        assert res.ok
        t = res.t
        assert f(x0 + t * d) <= f(x0) + c1 * t * dirder + 1e-12
        assert g(x0 + t * d) * d >= c2 * dirder - 1e-12


# ---------------------------------------------------------------------------
# penalty assembly


def _constrained_problem():
    # f = x.x, ci: x0 - 1 <= 0, ce: x1 - 0.5 = 0
    def fn(box):
        x = box.x
        return x.dot(x), x[0] - 1.0, x[1] - 0.5

    return ProblemDefinition(VariableSpec({"x": (2,)}), fn)


def test_penalty_gradient_interior_is_scaled_objective_gradient():
    prob = _constrained_problem()
    rec = evaluate(prob, np.array([0.5, 0.5]))  # ci inactive, ce = 0
    g = assemble_penalty_gradient(rec, mu=0.7)
    assert np.allclose(g, 0.7 * rec.grad_f)


def test_penalty_gradient_adds_violated_inequality_row():
    prob = _constrained_problem()
    rec = evaluate(prob, np.array([2.0, 0.5]))
    g = assemble_penalty_gradient(rec, mu=1.0)
    assert np.allclose(g, rec.grad_f + np.array([1.0, 0.0]))


def test_penalty_gradient_matches_finite_differences_on_odl():
    rng = np.random.default_rng(8)
    Y = rng.normal(size=(4, 12))
    m = Y.shape[1]

    def fn(box):
        q = box.q
        return (q.T @ Y).norm(1) * (1.0 / m), None, q.T @ q - 1.0

    prob = ProblemDefinition(VariableSpec({"q": (4, 1)}), fn)
    mu = 0.37
    x = rng.normal(size=4) * 1.7   # infeasible

    def phi(z):
        rec = evaluate(prob, z)
        return penalty_value(rec, mu)

    rec = evaluate(prob, x)
    g = assemble_penalty_gradient(rec, mu)
    fd = central_diff(phi, x)
    assert np.max(np.abs(g - fd)) <= 1e-5


# ---------------------------------------------------------------------------
# solve


def test_solve_unconstrained_quadratic():
    rng = np.random.default_rng(100)
    a = rng.normal(size=10)
    sol = solve(quadratic_problem(a), SolverOptions(seed=1))
    assert sol.status is TerminationCode.CONVERGED
    assert sol.iterations <= 50
    assert np.max(np.abs(sol.x - a)) <= 1e-6


def test_solve_hyperplane_projection():
    def fn(box):
        x = box.x
        return x.dot(x), None, x[0] - 1.0

    prob = ProblemDefinition(VariableSpec({"x": (3,)}), fn)
    sol = solve(prob, SolverOptions(seed=3))
    assert sol.max_violation <= 1e-8
    assert np.allclose(sol.x, [1.0, 0.0, 0.0], atol=1e-6)
    assert abs(sol.f - 1.0) <= 1e-6


def test_solve_matches_textbook_bfgs_for_ten_iterations():
    rng = np.random.default_rng(55)
    n = 10
    M = rng.normal(size=(n, n))
    Q = M @ M.T + np.eye(n)
    a = rng.normal(size=n)
    prob = general_quadratic_problem(Q, a)

    seed = 4
    iterates = []
    solve(prob, SolverOptions(seed=seed, max_iter=10),
          observer=lambda k, x: iterates.append(x.copy()))

    x0 = np.random.default_rng(seed).standard_normal(n)

    def fg(x):
        diff = x - a
        return 0.5 * float(diff @ Q @ diff), Q @ diff

    ref = textbook_bfgs(fg, x0, iters=10)
    assert len(iterates) >= 10
    for mine, theirs in zip(iterates[:10], ref[1:11]):
        assert np.max(np.abs(mine - theirs)) <= 1e-8


def test_mu_monotone_and_phi_monotone_between_mu_changes():
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(5, 40))
    m = Y.shape[1]

    def fn(box):
        q = box.q
        return (q.T @ Y).norm(1) * (1.0 / m), None, q.T @ q - 1.0

    prob = ProblemDefinition(VariableSpec({"q": (5, 1)}), fn)
    sol = solve(prob, SolverOptions(seed=0, max_iter=150))
    mus = [r.mu for r in sol.log]
    assert all(m2 <= m1 + 0.0 for m1, m2 in zip(mus, mus[1:]))
    assert all(m > 0 for m in mus)
    for r1, r2 in zip(sol.log, sol.log[1:]):
        if r1.mu == r2.mu and r2.step > 0.0:
            assert r2.phi <= r1.phi + 1e-12
    assert all(np.isfinite(r.phi) for r in sol.log)


def test_hessian_stays_spd_during_runs(monkeypatch):
    min_eigs = []

    class SpyHessian(DenseInverseHessian):
        def update(self, s, y):
            super().update(s, y)
            min_eigs.append(float(np.min(np.linalg.eigvalsh(self.H))))

    monkeypatch.setattr(solver_mod, "DenseInverseHessian", SpyHessian)
    rng = np.random.default_rng(31)
    a = rng.normal(size=4)
    sol = solve(quadratic_problem(a), SolverOptions(seed=9))
    assert sol.status is TerminationCode.CONVERGED
    assert min_eigs and all(e > 0.0 for e in min_eigs)


def test_converged_is_recheckable_from_solution_record():
    rng = np.random.default_rng(6)
    a = rng.normal(size=6)
    sol = solve(quadratic_problem(a), SolverOptions(seed=2))
    assert sol.status is TerminationCode.CONVERGED
    assert sol.stationarity <= sol.options.opt_tol * sol.stationarity_scale
    assert sol.max_violation <= max(sol.options.viol_ineq_tol,
                                    sol.options.viol_eq_tol)
    assert sol.iterations == len(sol.log)


def test_solve_limited_memory_mode():
    rng = np.random.default_rng(21)
    a = rng.normal(size=12)
    sol = solve(quadratic_problem(a),
                SolverOptions(seed=5, limited_memory_pairs=6))
    assert sol.status is TerminationCode.CONVERGED
    assert np.max(np.abs(sol.x - a)) <= 1e-6


def test_numerical_error_termination_preserves_log():
    def fn(box):
        x = box.x
        return (1.0 / x[0]).reshape(()), None, None

    prob = ProblemDefinition(VariableSpec({"x": (1,)}), fn)
    sol = solve(prob, SolverOptions(x0=np.array([0.0]), seed=0))
    assert sol.status is TerminationCode.NUMERICAL_ERROR


def test_stationary_infeasible_on_inconsistent_constraints():
    # x = 0 and x = 1 cannot both hold; violation has a flat minimum at 0.5
    def fn(box):
        x = box.x
        return (x[0] * 0.0).reshape(()), None, [x[0], x[0] - 1.0]

    prob = ProblemDefinition(VariableSpec({"x": (1,)}), fn)
    sol = solve(prob, SolverOptions(seed=0, max_iter=200))
    assert sol.status is TerminationCode.STATIONARY_INFEASIBLE
    assert sol.max_violation > 0.4


def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(wolfe_c1=0.9, wolfe_c2=0.5)
    with pytest.raises(ValueError):
        SolverOptions(steering_c_v=1.5)
    with pytest.raises(ValueError):
        SolverOptions(opt_tol=0.0)


def test_solve_limited_memory_with_constraints():
    def fn(box):
        x = box.x
        return x.dot(x), x[0] - 2.0, x[1] - 0.5

    prob = ProblemDefinition(VariableSpec({"x": (4,)}), fn)
    sol = solve(prob, SolverOptions(seed=7, limited_memory_pairs=5,
                                    max_iter=200))
    assert sol.max_violation <= 1e-8
    assert np.allclose(sol.x, [0.0, 0.5, 0.0, 0.0], atol=1e-5)


def test_penalty_fast_path_matches_assembled_gradient():
    rng = np.random.default_rng(17)
    Y = rng.normal(size=(5, 30))

    def fn(box):
        q = box.q
        f = (q.T @ Y).norm(1) * (1.0 / 30)
        ci = [q.T @ q - 2.0, -q[2, 0] - 0.3]
        ce = q[0, 0] - 0.2
        return f, ci, ce

    prob = ProblemDefinition(VariableSpec({"q": (5, 1)}), fn)
    for mu in (1.0, 0.25, 1e-3):
        for _ in range(5):
            x = rng.normal(size=5)
            pe = evaluate_penalty(prob, x, mu)
            rec = evaluate(prob, x)
            assert abs(pe.phi - penalty_value(rec, mu)) <= 1e-12 * max(
                1.0, abs(pe.phi))
            assembled = assemble_penalty_gradient(rec, mu)
            assert np.max(np.abs(pe.grad_phi - assembled)) <= 1e-12
            assert np.array_equal(pe.ci, rec.ci)
            assert np.array_equal(pe.ce, rec.ce)
