#!/usr/bin/env python3
"""
tensor_ad.py
Dense-matrix reverse-mode automatic differentiation on a define-by-run tape.

Every quantity of the unrolled forward/backward rollout is a 2-D float64
matrix. Operations are recorded on a Tape in execution order (a Wengert list),
so replaying the list backwards yields the adjoints of all trainable leaves.

- import usage:
    from step_1_autodiff.tensor_ad import Tape, backward
    tape = Tape()
    w = tape.leaf(np.ones((2, 2)), trainable=True, name="w")
    loss = tape.record_op("sum", [tape.record_op("square", [w])])
    grads = tape.gradients_by_name(backward(tape, loss))
"""

from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# Logistic arguments are clamped here; exp(500) is still finite in float64.
LOGISTIC_CLAMP = 500.0

ArrayLike = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    """Raised when the operand shapes do not fit the requested operation."""

    def __init__(self, op_kind: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op_kind = op_kind
        self.shapes = [tuple(s) for s in shapes]
        message = f"shape mismatch in '{op_kind}': {self.shapes}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonScalarRootError(ValueError):
    """Raised when backward() is asked to differentiate a non-scalar tensor."""


class NonFiniteError(ValueError):
    """Raised when a finite-difference evaluation produces a non-finite value."""


def as_matrix(values: Any) -> np.ndarray:
    """Convert scalars to 1x1 and vectors to columns; copy into float64."""
    array = np.array(values, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(-1, 1)
    if array.ndim != 2:
        raise ShapeError("leaf", [array.shape], "tensors are 2-D matrices")
    return array


class Tensor:
    """A 2-D float64 matrix, optionally linked to a node on a gradient tape."""

    # Make numpy defer to the reflected operators below instead of broadcasting
    # a Tensor into an object array.
    __array_ufunc__ = None

    def __init__(self, values: np.ndarray, tape: "Tape", node_id: Optional[int] = None,
                 name: Optional[str] = None):
        self.values = values
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def T(self) -> "Tensor":
        return self.tape.record_op("transpose", [self])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id}, name={self.name})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("add", [self, other])

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("add", [other, self])

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("sub", [self, other])

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("sub", [other, self])

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return self.tape.record_op("scale", [self], factor=float(other))
        return self.tape.record_op("mul", [self, other])

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return self.tape.record_op("scale", [self], factor=float(other))
        return self.tape.record_op("mul", [other, self])

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return self.tape.record_op("scale", [self], factor=1.0 / float(other))
        return self * self.tape.record_op("reciprocal", [other])

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("reciprocal", [self]) * other

    def __neg__(self) -> "Tensor":
        return self.tape.record_op("scale", [self], factor=-1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("matmul", [self, other])

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return self.tape.record_op("matmul", [other, self])

    def __getitem__(self, key: Any) -> "Tensor":
        return self.tape.record_op("slice", [self], key=key)


class _Node:
    __slots__ = ("kind", "inputs", "attrs", "value", "input_values")

    def __init__(self, kind: str, inputs: List[int], attrs: Dict[str, Any], value: np.ndarray,
                 input_values: List[np.ndarray]):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.input_values = input_values


def _logistic(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGISTIC_CLAMP, LOGISTIC_CLAMP)))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast adjoint back down to the operand shape."""
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sum_forward(a: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
    if axis is None:
        return np.array([[a.sum()]])
    return a.sum(axis=axis, keepdims=True)


def _slice_forward(a: np.ndarray, key: Any) -> np.ndarray:
    return np.array(a[key], dtype=np.float64)


def _slice_adjoint(g, out, a, key):
    grad = np.zeros_like(a)
    np.add.at(grad, key, g)
    return (grad,)


def _concat_adjoint(g, out, *inputs, axis=1):
    splits = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


_FORWARD: Dict[str, Callable[..., np.ndarray]] = {
    "matmul": lambda a, b: a @ b,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "scale": lambda a, factor: a * factor,
    "tanh": np.tanh,
    "sigmoid": _logistic,
    "sum": _sum_forward,
    "square": np.square,
    "concat": lambda *xs, axis=1: np.concatenate(xs, axis=axis),
    "reciprocal": lambda a: 1.0 / a,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "clip": lambda a, low, high: np.clip(a, low, high),
    "slice": _slice_forward,
    "transpose": lambda a: a.T.copy(),
}

# Each adjoint receives (upstream grad, forward output, *input values, **attrs)
# and returns one gradient per input, shaped like that input.
_ADJOINT: Dict[str, Callable[..., Tuple[np.ndarray, ...]]] = {
    "matmul": lambda g, out, a, b: (g @ b.T, a.T @ g),
    "add": lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "mul": lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "scale": lambda g, out, a, factor: (g * factor,),
    "tanh": lambda g, out, a: (g * (1.0 - out * out),),
    "sigmoid": lambda g, out, a: (g * out * (1.0 - out) * (np.abs(a) <= LOGISTIC_CLAMP),),
    "sum": lambda g, out, a, axis=None: (np.broadcast_to(g, a.shape).copy(),),
    "square": lambda g, out, a: (2.0 * a * g,),
    "concat": _concat_adjoint,
    "reciprocal": lambda g, out, a: (-g * out * out,),
    "sin": lambda g, out, a: (g * np.cos(a),),
    "cos": lambda g, out, a: (-g * np.sin(a),),
    "exp": lambda g, out, a: (g * out,),
    "log": lambda g, out, a: (g / a,),
    "clip": lambda g, out, a, low, high: (g * ((a >= low) & (a <= high)),),
    "slice": _slice_adjoint,
    "transpose": lambda g, out, a: (g.T,),
}

_UNARY = {"scale", "tanh", "sigmoid", "sum", "square", "reciprocal", "sin", "cos", "exp", "log",
          "clip", "slice", "transpose"}
_BROADCASTING = {"add", "sub", "mul"}


def _check_shapes(kind: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    shapes = [v.shape for v in values]
    if kind not in _FORWARD:
        raise ValueError(f"unknown op-kind '{kind}'")
    if kind in _UNARY and len(values) != 1:
        raise ShapeError(kind, shapes, "expects one input")
    if kind == "matmul":
        if len(values) != 2 or shapes[0][1] != shapes[1][0]:
            raise ShapeError(kind, shapes, "inner dimensions differ")
    elif kind in _BROADCASTING:
        if len(values) != 2:
            raise ShapeError(kind, shapes, "expects two inputs")
        try:
            np.broadcast_shapes(shapes[0], shapes[1])
        except ValueError:
            raise ShapeError(kind, shapes, "operands do not broadcast") from None
    elif kind == "concat":
        axis = attrs.get("axis", 1)
        other = 1 - axis
        if not values or len({s[other] for s in shapes}) != 1:
            raise ShapeError(kind, shapes, f"sizes along axis {other} differ")


class Tape:
    """
    Ordered record of primitive operations.

    With record=False the same graph code only computes forward values, which
    is what evaluation rollouts use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: List[_Node] = []
        self.trainable: Dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.trainable = {}

    def leaf(self, values: Any, trainable: bool = False, name: Optional[str] = None) -> Tensor:
        """
        Register an input matrix.

        Args:
            values: Array-like content, converted to a float64 matrix
            trainable: Whether backward() should report its gradient
            name: Label used by gradients_by_name()

        Returns:
            The leaf tensor
        """
        array = as_matrix(values)
        if not self.record:
            return Tensor(array, self, None, name)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", [], {}, array, []))
        if trainable:
            self.trainable[node_id] = name if name is not None else f"leaf_{node_id}"
        return Tensor(array, self, node_id, name)

    def constant(self, values: Any) -> Tensor:
        return self.leaf(values, trainable=False)

    def _lift(self, item: ArrayLike) -> Tensor:
        if isinstance(item, Tensor):
            if item.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return item
        return self.constant(item)

    def record_op(self, kind: str, inputs: Sequence[ArrayLike], **attrs: Any) -> Tensor:
        """
        Compute a primitive and append it to the tape.

        Args:
            kind: One of the registered op-kinds (matmul, add, mul, tanh, ...)
            inputs: Operand tensors; plain arrays become constants
            **attrs: Op attributes (scale factor, sum axis, slice key, ...)

        Returns:
            The result tensor
        """
        tensors = [self._lift(item) for item in inputs]
        values = [t.values for t in tensors]
        _check_shapes(kind, values, attrs)
        out = _FORWARD[kind](*values, **attrs)
        if out.ndim != 2:
            raise ShapeError(kind, [v.shape for v in values], f"result has {out.ndim} dimensions")
        if not self.record:
            return Tensor(out, self)
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, [t.node_id for t in tensors], attrs, out, values))
        return Tensor(out, self, node_id)

    def gradients_by_name(self, grads: Dict[int, np.ndarray]) -> Dict[str, np.ndarray]:
        return {self.trainable[node_id]: g for node_id, g in grads.items()}


def backward(tape: Tape, root: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse sweep from a scalar root.

    Returns:
        Mapping node-id -> d(root)/d(leaf) for every trainable leaf; leaves the
        root does not depend on get a zero matrix.
    """
    if root.shape != (1, 1):
        raise NonScalarRootError(f"backward() needs a 1x1 root, got {root.shape}")
    if root.node_id is None or root.tape is not tape:
        raise ValueError("root was not recorded on this tape")

    adjoints: Dict[int, np.ndarray] = {root.node_id: np.ones((1, 1))}
    for node_id in range(root.node_id, -1, -1):
        grad = adjoints.get(node_id)
        node = tape.nodes[node_id]
        if grad is None or node.kind == "leaf":
            continue
        input_grads = _ADJOINT[node.kind](grad, node.value, *node.input_values, **node.attrs)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_id in adjoints:
                adjoints[input_id] = adjoints[input_id] + input_grad
            else:
                adjoints[input_id] = input_grad

    return {
        node_id: adjoints.get(node_id, np.zeros_like(tape.nodes[node_id].value))
        for node_id in tape.trainable
    }


def grad_check(f: Callable[[Tape, Tensor], Tensor], point: Any, step: float = 1e-5) -> float:
    """
    Compare the tape gradient of a scalar function with central differences.

    Args:
        f: Builds a scalar tensor from a parameter tensor on the given tape
        point: Parameter values at which to compare
        step: Finite-difference step

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    base = as_matrix(point)
    tape = Tape()
    param = tape.leaf(base, trainable=True, name="p")
    root = f(tape, param)
    if not np.all(np.isfinite(root.values)):
        raise NonFiniteError("f is not finite at the given point")
    analytic = backward(tape, root)[param.node_id]

    def evaluate(values: np.ndarray) -> float:
        scratch = Tape(record=False)
        value = float(f(scratch, scratch.leaf(values)).values[0, 0])
        if not np.isfinite(value):
            raise NonFiniteError(f"f is not finite at perturbed point {values.ravel().tolist()}")
        return value

    worst = 0.0
    for index in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[index] += step
        minus[index] -= step
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        error = abs(analytic[index] - numeric) / max(1.0, abs(analytic[index]))
        worst = max(worst, error)
    return worst


# Functions below accept plain numpy arrays or tape tensors, so model code
# (dynamics, costs, the LSTM cell) is written once for both.

def _unary(kind: str, numpy_fn: Callable[[np.ndarray], np.ndarray]) -> Callable[[ArrayLike], ArrayLike]:
    def apply(x: ArrayLike) -> ArrayLike:
        if isinstance(x, Tensor):
            return x.tape.record_op(kind, [x])
        return numpy_fn(np.asarray(x, dtype=np.float64))
    apply.__name__ = kind
    return apply


sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
tanh = _unary("tanh", np.tanh)
exp = _unary("exp", np.exp)
log = _unary("log", np.log)
square = _unary("square", np.square)
sigmoid = _unary("sigmoid", _logistic)


def clip(x: ArrayLike, low: float, high: float) -> ArrayLike:
    if isinstance(x, Tensor):
        return x.tape.record_op("clip", [x], low=low, high=high)
    return np.clip(x, low, high)


def row_sum(x: ArrayLike) -> ArrayLike:
    """Sum across columns, keeping one column."""
    if isinstance(x, Tensor):
        return x.tape.record_op("sum", [x], axis=1)
    return np.sum(x, axis=1, keepdims=True)


def total(x: ArrayLike) -> ArrayLike:
    if isinstance(x, Tensor):
        return x.tape.record_op("sum", [x])
    return np.array([[np.sum(x)]])


def concatenate(items: Sequence[ArrayLike], axis: int = 1) -> ArrayLike:
    tensors = [item for item in items if isinstance(item, Tensor)]
    if tensors:
        return tensors[0].tape.record_op("concat", list(items), axis=axis)
    return np.concatenate([np.asarray(item, dtype=np.float64) for item in items], axis=axis)


def values_of(x: ArrayLike) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
