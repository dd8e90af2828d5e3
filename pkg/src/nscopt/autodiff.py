"""Tape-based reverse-mode automatic differentiation on dense float64 tensors.

Values are C-ordered ``numpy.float64`` arrays; scalars are rank-0 arrays.
Every operation evaluates eagerly and appends a node to its tape, so the
node list is already in topological order when a backward pass runs.

Nonsmooth ops use fixed (deterministic) subgradient selections:

* ``d|t|/dt = 0`` and ``d relu(t)/dt = 0`` at ``t = 0``;
* the gradient of a max over elements goes to the lowest flat index among
  the maximizers;
* the infinity norm routes its sign to the lowest-index entry of maximal
  magnitude;
* elementwise ``maximum`` ties route to the first argument;
* the 2-norm has gradient 0 at the origin.

Broadcasting is restricted to scalar-with-tensor; elementwise ops on two
non-scalar operands require identical shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = ["Tape", "Node", "concat", "dot", "maximum", "relu"]


def _freeze(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C")
    arr.setflags(write=False)
    return arr


def _is_scalar(shape: tuple) -> bool:
    return shape == ()


class Node:
    """One entry in a tape: an op, its inputs, and the eager forward value."""

    __slots__ = ("tape", "op", "inputs", "value", "adjoint", "index",
                 "requires_grad", "name", "extra")

    # keep numpy from intercepting `ndarray <op> Node`; reflected methods run
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", op: str, inputs: tuple, value: np.ndarray,
                 requires_grad: bool, name: str | None = None, extra=None):
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.value = value
        self.adjoint: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.extra = extra
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"<Node {self.op}{tag} shape={self.shape}>"

    # -- operator sugar -------------------------------------------------

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ContractError("cannot combine nodes from different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return _elementwise("add", self, self._lift(other))

    def __radd__(self, other):
        return _elementwise("add", self._lift(other), self)

    def __sub__(self, other):
        return _elementwise("sub", self, self._lift(other))

    def __rsub__(self, other):
        return _elementwise("sub", self._lift(other), self)

    def __mul__(self, other):
        return _elementwise("mul", self, self._lift(other))

    def __rmul__(self, other):
        return _elementwise("mul", self._lift(other), self)

    def __truediv__(self, other):
        return _elementwise("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return _elementwise("div", self._lift(other), self)

    def __neg__(self):
        return Node(self.tape, "neg", (self,), _freeze(-self.value),
                    self.requires_grad)

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.value, other.value
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError("matmul", a.shape, b.shape)
        if a.shape[-1] != (b.shape[0] if b.ndim >= 1 else None):
            raise ShapeError("matmul", a.shape, b.shape)
        return Node(self.tape, "matmul", (self, other), _freeze(a @ b),
                    self.requires_grad or other.requires_grad)

    def __rmatmul__(self, other):
        return self._lift(other).__matmul__(self)

    @property
    def T(self) -> "Node":
        return Node(self.tape, "transpose", (self,), _freeze(self.value.T),
                    self.requires_grad)

    def reshape(self, shape) -> "Node":
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=int)) != self.size:
            raise ShapeError("reshape", self.shape, shape)
        return Node(self.tape, "reshape", (self,),
                    _freeze(self.value.reshape(shape)), self.requires_grad)

    def sum(self) -> "Node":
        return Node(self.tape, "sum", (self,), _freeze(self.value.sum()),
                    self.requires_grad)

    def mean(self) -> "Node":
        return Node(self.tape, "mean", (self,), _freeze(self.value.mean()),
                    self.requires_grad)

    def dot(self, other) -> "Node":
        other = self._lift(other)
        if self.value.ndim != 1 or other.value.ndim != 1 \
                or self.shape != other.shape:
            raise ShapeError("dot", self.shape, other.shape)
        return Node(self.tape, "dot", (self, other),
                    _freeze(np.dot(self.value, other.value)),
                    self.requires_grad or other.requires_grad)

    def abs(self) -> "Node":
        return Node(self.tape, "abs", (self,), _freeze(np.abs(self.value)),
                    self.requires_grad)

    def relu(self) -> "Node":
        return Node(self.tape, "relu", (self,),
                    _freeze(np.maximum(self.value, 0.0)), self.requires_grad)

    def maximum(self, other) -> "Node":
        other = self._lift(other)
        _check_elementwise("maximum", self, other)
        return Node(self.tape, "maximum", (self, other),
                    _freeze(np.maximum(self.value, other.value)),
                    self.requires_grad or other.requires_grad)

    def max(self) -> "Node":
        """Maximum over all elements (rank-0 result)."""
        if self.size == 0:
            raise ShapeError("max", self.shape)
        return Node(self.tape, "max", (self,), _freeze(self.value.max()),
                    self.requires_grad)

    def norm(self, p) -> "Node":
        """p-norm over all elements, p in {1, 2, inf}."""
        flat = self.value.ravel()
        if p == 1:
            val = np.abs(flat).sum()
        elif p == 2:
            val = np.sqrt(np.square(flat).sum())
        elif p in (np.inf, "inf"):
            p = np.inf
            if flat.size == 0:
                raise ShapeError("norm", self.shape)
            val = np.abs(flat).max()
        else:
            raise ValueError(f"unsupported norm order {p!r}; use 1, 2 or inf")
        return Node(self.tape, "norm", (self,), _freeze(val),
                    self.requires_grad, extra=p)

    def square(self) -> "Node":
        return Node(self.tape, "square", (self,),
                    _freeze(np.square(self.value)), self.requires_grad)

    def sqrt(self) -> "Node":
        if np.any(self.value <= 0.0):
            raise DomainError("sqrt requires strictly positive input")
        return Node(self.tape, "sqrt", (self,), _freeze(np.sqrt(self.value)),
                    self.requires_grad)

    def exp(self) -> "Node":
        return Node(self.tape, "exp", (self,), _freeze(np.exp(self.value)),
                    self.requires_grad)

    def log(self) -> "Node":
        if np.any(self.value <= 0.0):
            raise DomainError("log requires strictly positive input")
        return Node(self.tape, "log", (self,), _freeze(np.log(self.value)),
                    self.requires_grad)

    def __getitem__(self, key) -> "Node":
        try:
            sub = self.value[key]
        except IndexError as exc:
            raise ShapeError("index", self.shape) from exc
        if not isinstance(sub, np.ndarray):
            sub = np.asarray(sub)
        return Node(self.tape, "index", (self,), _freeze(sub),
                    self.requires_grad, extra=key)


def _check_elementwise(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and not _is_scalar(a.shape) \
            and not _is_scalar(b.shape):
        raise ShapeError(op, a.shape, b.shape)


def _elementwise(op: str, a: Node, b: Node) -> Node:
    _check_elementwise(op, a, b)
    fwd = {"add": np.add, "sub": np.subtract,
           "mul": np.multiply, "div": np.divide}[op]
    return Node(a.tape, op, (a, b), _freeze(fwd(a.value, b.value)),
                a.requires_grad or b.requires_grad)


def relu(x: Node) -> Node:
    return x.relu()


def maximum(a: Node, b) -> Node:
    return a.maximum(b)


def dot(a: Node, b) -> Node:
    return a.dot(b)


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    """Concatenate nodes along ``axis``; shapes must agree elsewhere."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat", ())
    tape = parts[0].tape
    for p in parts:
        if p.tape is not tape:
            raise ContractError("cannot combine nodes from different tapes")
    try:
        val = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *[p.shape for p in parts]) from exc
    return Node(tape, "concat", tuple(parts), _freeze(val),
                any(p.requires_grad for p in parts), extra=axis)


# -- backward rules ------------------------------------------------------

def _unbroadcast(g: np.ndarray, target_shape: tuple) -> np.ndarray:
    if g.shape == target_shape:
        return g
    # only scalar broadcast is possible
    return np.asarray(g.sum())


def _vjp_add(node, g):
    return (_unbroadcast(g, node.inputs[0].shape),
            _unbroadcast(g, node.inputs[1].shape))


def _vjp_sub(node, g):
    return (_unbroadcast(g, node.inputs[0].shape),
            _unbroadcast(-g, node.inputs[1].shape))


def _vjp_mul(node, g):
    a, b = node.inputs
    return (_unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape))


def _vjp_div(node, g):
    a, b = node.inputs
    return (_unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / np.square(b.value), b.shape))


def _vjp_neg(node, g):
    return (-g,)


def _vjp_matmul(node, g):
    a, b = node.inputs
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        return (g @ bv.T, av.T @ g)
    if av.ndim == 2 and bv.ndim == 1:
        return (np.outer(g, bv), av.T @ g)
    if av.ndim == 1 and bv.ndim == 2:
        return (bv @ g, np.outer(av, g))
    return (g * bv, g * av)  # 1-D @ 1-D


def _vjp_transpose(node, g):
    return (g.T,)


def _vjp_reshape(node, g):
    return (g.reshape(node.inputs[0].shape),)


def _vjp_sum(node, g):
    return (np.full(node.inputs[0].shape, float(g)),)


def _vjp_mean(node, g):
    a = node.inputs[0]
    return (np.full(a.shape, float(g) / a.size),)


def _vjp_dot(node, g):
    a, b = node.inputs
    return (g * b.value, g * a.value)


def _vjp_abs(node, g):
    return (g * np.sign(node.inputs[0].value),)


def _vjp_relu(node, g):
    return (g * (node.inputs[0].value > 0.0),)


def _vjp_maximum(node, g):
    a, b = node.inputs
    take_a = a.value >= b.value  # ties go to the first argument
    ga = g * take_a
    gb = g * ~take_a
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


def _vjp_max(node, g):
    a = node.inputs[0]
    grad = np.zeros(a.size)
    grad[int(np.argmax(a.value.ravel()))] = float(g)
    return (grad.reshape(a.shape),)


def _vjp_norm(node, g):
    a = node.inputs[0]
    flat = a.value.ravel()
    p = node.extra
    if p == 1:
        grad = np.sign(flat)
    elif p == 2:
        r = float(node.value)
        grad = flat / r if r > 0.0 else np.zeros_like(flat)
    else:  # inf
        grad = np.zeros_like(flat)
        i = int(np.argmax(np.abs(flat)))
        grad[i] = np.sign(flat[i])
    return ((float(g) * grad).reshape(a.shape),)


def _vjp_square(node, g):
    return (2.0 * g * node.inputs[0].value,)


def _vjp_sqrt(node, g):
    return (g / (2.0 * node.value),)


def _vjp_exp(node, g):
    return (g * node.value,)


def _vjp_log(node, g):
    return (g / node.inputs[0].value,)


def _vjp_index(node, g):
    a = node.inputs[0]
    grad = np.zeros(a.shape)
    np.add.at(grad, node.extra, g)
    return (grad,)


def _vjp_concat(node, g):
    axis = node.extra
    sizes = [p.shape[axis] for p in node.inputs]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


_VJPS: dict[str, Callable] = {
    "add": _vjp_add, "sub": _vjp_sub, "mul": _vjp_mul, "div": _vjp_div,
    "neg": _vjp_neg, "matmul": _vjp_matmul, "transpose": _vjp_transpose,
    "reshape": _vjp_reshape, "sum": _vjp_sum, "mean": _vjp_mean,
    "dot": _vjp_dot, "abs": _vjp_abs, "relu": _vjp_relu,
    "maximum": _vjp_maximum, "max": _vjp_max, "norm": _vjp_norm,
    "square": _vjp_square, "sqrt": _vjp_sqrt, "exp": _vjp_exp,
    "log": _vjp_log, "index": _vjp_index, "concat": _vjp_concat,
}


class Tape:
    """Recorder for one differentiable computation.

    A tape is confined to a single thread; build a fresh tape per
    evaluation point. Leaf names must be unique within a tape.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._leaf_names: set[str] = set()

    def leaf(self, name: str, value, requires_grad: bool = True) -> Node:
        if name in self._leaf_names:
            raise ContractError(f"duplicate leaf name '{name}'")
        self._leaf_names.add(name)
        return Node(self, "leaf", (), _freeze(value), requires_grad, name=name)

    def constant(self, value) -> Node:
        return Node(self, "const", (), _freeze(value), requires_grad=False)

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``root`` with respect to every grad leaf.

        Adjoints accumulate in reverse creation order; repeated calls on
        the same tape are bit-identical.
        """
        if root.tape is not self:
            raise ContractError("root node does not belong to this tape")
        if root.shape != ():
            raise ContractError(
                f"backward requires a scalar root, got shape {root.shape}")
        limit = root.index + 1
        for node in self.nodes[:limit]:
            node.adjoint = None
        root.adjoint = np.ones(())
        for node in reversed(self.nodes[:limit]):
            if node.adjoint is None or not node.requires_grad:
                continue
            if node.op in ("leaf", "const"):
                continue
            grads = _VJPS[node.op](node, node.adjoint)
            for inp, ginp in zip(node.inputs, grads):
                if not inp.requires_grad:
                    continue
                if inp.adjoint is None:
                    inp.adjoint = np.zeros(inp.shape)
                inp.adjoint = inp.adjoint + ginp
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.op == "leaf" and node.requires_grad:
                adj = node.adjoint if node.index < limit else None
                if adj is None:
                    adj = np.zeros(node.shape)
                out[node.name] = np.array(adj, copy=True)
        return out
