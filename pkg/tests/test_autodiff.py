"""Tests for the reverse-mode tape: forward values, gradients, conventions."""

import numpy as np
import pytest

from nscopt.autodiff import Tape, concat, maximum
from nscopt.errors import ContractError, DomainError, ShapeError

# ---------------------------------------------------------------------------
# oracles


def central_diff(fn, x0, step=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return g


def odl_objective_loops(q, Y):
    """1/m * ||q^T Y||_1 computed with explicit scalar loops."""
    n, m = Y.shape
    total = 0.0
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += q[i] * Y[i, j]
        total += abs(s)
    return total / m


# ---------------------------------------------------------------------------
# forward values


def test_matmul_shape_rule():
    tape = Tape()
    a = tape.leaf("a", np.ones((2, 3)))
    b = tape.leaf("b", np.ones((3, 4)))
    assert (a @ b).shape == (2, 4)


def test_matmul_shape_mismatch():
    tape = Tape()
    a = tape.leaf("a", np.ones((2, 3)))
    b = tape.leaf("b", np.ones((4, 4)))
    with pytest.raises(ShapeError, match="matmul"):
        a @ b


def test_pnorm1_definition():
    tape = Tape()
    q = tape.leaf("q", np.array([1.0, -2.0, 0.0]))
    assert float(q.norm(1).value) == 3.0


def test_odl_expression_matches_scalar_loops():
    rng = np.random.default_rng(7)
    Y = rng.normal(size=(3, 5))
    q = np.zeros(3)
    q[0] = 1.0
    tape = Tape()
    qn = tape.leaf("q", q.reshape(3, 1))
    Yc = tape.constant(Y)
    f = (qn.T @ Yc).norm(1) * (1.0 / 5.0)
    expected = odl_objective_loops(q, Y)
    assert abs(float(f.value) - expected) <= 1e-12 * max(1.0, abs(expected))
    # q = e1 picks out the first row
    assert np.isclose(float(f.value), np.abs(Y[0]).sum() / 5.0)


def test_elementwise_requires_equal_shapes():
    tape = Tape()
    a = tape.leaf("a", np.ones(3))
    b = tape.leaf("b", np.ones(4))
    with pytest.raises(ShapeError, match="add"):
        a + b


def test_scalar_broadcast_allowed():
    tape = Tape()
    a = tape.leaf("a", np.ones((2, 2)))
    out = a * 3.0 + 1.0
    assert np.allclose(out.value, 4.0)
    assert out.shape == (2, 2)


def test_domain_errors():
    tape = Tape()
    a = tape.leaf("a", np.array([1.0, -1.0]))
    with pytest.raises(DomainError):
        a.sqrt()
    with pytest.raises(DomainError):
        a.log()
    z = tape.leaf("z", np.array([0.0]))
    with pytest.raises(DomainError):
        z.sqrt()


def test_duplicate_leaf_name_rejected():
    tape = Tape()
    tape.leaf("x", 1.0)
    with pytest.raises(ContractError):
        tape.leaf("x", 2.0)


def test_cross_tape_mix_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf("a", 1.0)
    b = t2.leaf("b", 1.0)
    with pytest.raises(ContractError):
        a + b


def test_index_slice_and_concat():
    tape = Tape()
    a = tape.leaf("a", np.arange(6.0).reshape(2, 3))
    assert float(a[1, 2].value) == 5.0
    assert a[0].shape == (3,)
    b = tape.leaf("b", np.ones((2, 3)))
    c = concat([a, b], axis=0)
    assert c.shape == (4, 3)
    g = tape.backward((c[3, 0] + a[1, 2]).reshape(()))
    expected_a = np.zeros((2, 3))
    expected_a[1, 2] = 1.0
    expected_b = np.zeros((2, 3))
    expected_b[1, 0] = 1.0
    assert np.array_equal(g["a"], expected_a)
    assert np.array_equal(g["b"], expected_b)


# ---------------------------------------------------------------------------
# backward: hand-checked gradients and subgradient conventions


def test_grad_of_squared_norm():
    rng = np.random.default_rng(0)
    q0 = rng.normal(size=4)
    tape = Tape()
    q = tape.leaf("q", q0)
    g = tape.backward(q.norm(2).square())
    assert np.allclose(g["q"], 2.0 * q0, atol=1e-12)


def test_odl_identity_gradient():
    q0 = np.array([0.5, -0.2, 0.1])
    tape = Tape()
    q = tape.leaf("q", q0.reshape(3, 1))
    Y = tape.constant(np.eye(3))
    f = (q.T @ Y).norm(1) * (1.0 / 3.0)
    g = tape.backward(f)
    assert np.allclose(g["q"].ravel(), np.sign(q0) / 3.0, atol=1e-15)


def test_backward_requires_scalar_root():
    tape = Tape()
    a = tape.leaf("a", np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(a + 1.0)


def test_abs_and_relu_subgradient_at_zero():
    tape = Tape()
    x = tape.leaf("x", np.array([0.0, -2.0, 3.0]))
    g1 = tape.backward(x.abs().sum())
    assert np.array_equal(g1["x"], [0.0, -1.0, 1.0])
    g2 = tape.backward(x.relu().sum())
    assert np.array_equal(g2["x"], [0.0, 0.0, 1.0])


def test_max_tie_goes_to_lowest_flat_index():
    tape = Tape()
    x = tape.leaf("x", np.array([[2.0, 2.0], [2.0, 1.0]]))
    g = tape.backward(x.max())
    assert np.array_equal(g["x"], [[1.0, 0.0], [0.0, 0.0]])


def test_inf_norm_sign_to_lowest_max_magnitude_index():
    tape = Tape()
    x = tape.leaf("x", np.array([-3.0, 3.0, 1.0]))
    g = tape.backward(x.norm(np.inf))
    assert np.array_equal(g["x"], [-1.0, 0.0, 0.0])


def test_elementwise_maximum_tie_to_first_argument():
    tape = Tape()
    a = tape.leaf("a", np.array([1.0, 5.0]))
    b = tape.leaf("b", np.array([1.0, 2.0]))
    g = tape.backward(a.maximum(b).sum())
    assert np.array_equal(g["a"], [1.0, 1.0])
    assert np.array_equal(g["b"], [0.0, 0.0])


def test_two_norm_gradient_zero_at_origin():
    tape = Tape()
    x = tape.leaf("x", np.zeros(3))
    g = tape.backward(x.norm(2))
    assert np.array_equal(g["x"], np.zeros(3))


def test_backward_deterministic_bit_identical():
    rng = np.random.default_rng(3)
    tape = Tape()
    x = tape.leaf("x", rng.normal(size=5))
    f = (x.abs().sum() + x.norm(2).square()) * 0.5
    g1 = tape.backward(f)["x"]
    g2 = tape.backward(f)["x"]
    assert g1.tobytes() == g2.tobytes()


def test_backward_linearity():
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=4)
    a, b = 2.5, -1.25
    tape = Tape()
    x = tape.leaf("x", x0)
    f = x.norm(2).square()
    g = (x.abs()).sum()
    gf = tape.backward(f)["x"]
    gg = tape.backward(g)["x"]
    combo = f * a + g * b
    gc = tape.backward(combo)["x"]
    assert np.allclose(gc, a * gf + b * gg, atol=1e-12)


def test_constant_objective_has_zero_gradient():
    tape = Tape()
    x = tape.leaf("x", np.ones(3))
    c = tape.constant(0.0)
    g = tape.backward(c)
    assert np.array_equal(g["x"], np.zeros(3))


# ---------------------------------------------------------------------------
# finite-difference oracle over composite graphs mixing every op

KINKY_MARGIN = 1e-3


def _kink_margin(tape):
    """Smallest distance of any nonsmooth/domain-edge op input from its kink."""
    margin = np.inf
    for node in tape.nodes:
        if node.op in ("abs", "relu"):
            margin = min(margin, np.abs(node.inputs[0].value).min())
        elif node.op == "maximum":
            a, b = node.inputs
            margin = min(margin, np.abs(a.value - b.value).min())
        elif node.op == "max":
            flat = np.sort(node.inputs[0].value.ravel())
            if flat.size >= 2:
                margin = min(margin, flat[-1] - flat[-2])
        elif node.op == "norm":
            flat = node.inputs[0].value.ravel()
            if node.extra == 1:
                margin = min(margin, np.abs(flat).min())
            elif node.extra == 2:
                margin = min(margin, np.linalg.norm(flat))
            else:
                mags = np.sort(np.abs(flat))
                if mags.size >= 2:
                    margin = min(margin, mags[-1] - mags[-2])
        elif node.op in ("sqrt", "log", "div"):
            v = node.inputs[-1].value
            margin = min(margin, np.abs(v).min())
    return margin


def _composite(tape, x, M, w):
    """Scalar graph touching every supported op.

    x: (4,) leaf, M: (3, 4) leaf, w: scalar leaf.
    """
    y = M @ x                                  # matmul (2D @ 1D)
    z = (M.T @ y)                              # transpose, matmul
    q = x.reshape((4, 1))
    outer = q.T @ M.T                          # (1,3)
    r = x * 2.0 - z / 3.5                      # scalar mul, sub, div
    s = x.maximum(r)                           # elementwise maximum
    t = concat([s, y], axis=0)                 # concat -> (7,)
    u = t.abs().sum() + t.relu().mean()        # abs, relu, sum, mean
    v = x.dot(r) + t.max() + outer.norm(np.inf)
    pieces = (x.square().sum().sqrt()          # square, sqrt
              + (x.square().sum() + 1.5).log() # log
              + (w * 0.01).exp()               # exp
              + t[2] + (-x).norm(1) + x.norm(2))
    return u + v * 0.5 + pieces + w * u


def test_composite_graphs_match_finite_differences():
    hits = set()
    checked = 0
    seed = 0
    while checked < 20:
        rng = np.random.default_rng(seed)
        seed += 1
        x0 = rng.normal(size=4)
        M0 = rng.normal(size=(3, 4))
        w0 = rng.normal()

        def value_at(flat):
            tape = Tape()
            x = tape.leaf("x", flat[:4])
            M = tape.leaf("M", flat[4:16].reshape(3, 4))
            w = tape.leaf("w", flat[16])
            return float(_composite(tape, x, M, w).value)

        tape = Tape()
        x = tape.leaf("x", x0)
        M = tape.leaf("M", M0)
        w = tape.leaf("w", w0)
        root = _composite(tape, x, M, w)
        if _kink_margin(tape) < KINKY_MARGIN:
            continue
        hits |= {n.op for n in tape.nodes}
        grads = tape.backward(root)
        auto = np.concatenate(
            [grads["x"], grads["M"].ravel(), np.atleast_1d(grads["w"])])
        flat0 = np.concatenate([x0, M0.ravel(), [w0]])
        fd = central_diff(value_at, flat0)
        denom = np.maximum(1.0, np.abs(fd))
        assert np.max(np.abs(auto - fd) / denom) <= 1e-6, f"seed {seed - 1}"
        checked += 1

    expected_ops = {"add", "sub", "mul", "div", "neg", "matmul", "transpose",
                    "reshape", "sum", "mean", "dot", "abs", "relu", "maximum",
                    "max", "norm", "square", "sqrt", "exp", "log", "index",
                    "concat", "leaf", "const"}
    assert expected_ops <= hits


def test_scalar_broadcast_gradients_match_finite_differences():
    rng = np.random.default_rng(23)
    v0 = rng.normal(size=4) + 3.0
    s0 = rng.normal() + 2.0

    def build(tape, v, s):
        a = v.maximum(s)                 # tensor vs scalar maximum
        b = 1.0 / (v + 5.0)              # reflected division
        c = 2.0 - v * s                  # reflected subtraction
        return a.sum() + b.sum() + c.norm(2).square() + (s / v.sum())

    def value_at(flat):
        tape = Tape()
        v = tape.leaf("v", flat[:4])
        s = tape.leaf("s", flat[4])
        return float(build(tape, v, s).value)

    tape = Tape()
    v = tape.leaf("v", v0)
    s = tape.leaf("s", s0)
    grads = tape.backward(build(tape, v, s))
    auto = np.concatenate([grads["v"], np.atleast_1d(grads["s"])])
    fd = central_diff(value_at, np.concatenate([v0, [s0]]))
    assert np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-6
