"""Dense float64 matrices and a minimal reverse-mode autodiff engine.

Every value is a 2-D float64 array (rows are samples). Shapes must agree
exactly; the only broadcast is adding a 1×cols row vector to a matrix.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

Matrix = np.ndarray
ArrayLike = np.ndarray | Sequence[float] | Sequence[Sequence[float]] | float


def as_matrix(values: ArrayLike, name: str = "value") -> Matrix:
    array = np.array(values, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(-1, 1)
    elif array.ndim != 2:
        raise ShapeError(f"{name}: expected a matrix, got {array.ndim}-d array")
    array = np.ascontiguousarray(array)
    _check_finite(array, name)
    return array


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op}: non-finite values")


class Node:
    """A value in a computation graph plus the rule that backpropagates into it."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        value: Matrix,
        *,
        requires_grad: bool = False,
        name: str = "",
        parents: tuple["Node", ...] = (),
        backward: Callable[[Matrix], None] | None = None,
    ) -> None:
        self.value = value
        self.grad: Matrix | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Node":
        return Node(self.value, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Node({self.name or 'anon'}, shape={self.shape}{flag})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)


def constant(values: ArrayLike, name: str = "const") -> Node:
    return Node(as_matrix(values, name), name=name)


def parameter(values: ArrayLike, name: str = "param") -> Node:
    return Node(as_matrix(values, name), requires_grad=True, name=name)


def _as_node(value: Node | ArrayLike, name: str) -> Node:
    if isinstance(value, Node):
        return value
    return constant(value, name)


def _result(
    value: Matrix,
    parents: tuple[Node, ...],
    backward: Callable[[Matrix], None],
    op: str,
) -> Node:
    _check_finite(value, op)
    if any(parent.requires_grad for parent in parents):
        return Node(value, requires_grad=True, name=op, parents=parents, backward=backward)
    return Node(value, name=op)


def _accumulate(node: Node, grad: Matrix) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        node.grad = node.grad + grad


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_row_broadcast(a: Node, b: Node) -> bool:
    return b.rows == 1 and a.rows > 1 and b.cols == a.cols


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    value = a.value @ b.value

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad @ b.value.T)
        _accumulate(b, a.value.T @ grad)

    return _result(value, (a, b), backward, "matmul")


def add(a: Node, b: Node) -> Node:
    broadcast = _is_row_broadcast(a, b)
    if not broadcast:
        _require_same_shape(a, b, "add")
    value = a.value + b.value

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad)
        _accumulate(b, grad.sum(axis=0, keepdims=True) if broadcast else grad)

    return _result(value, (a, b), backward, "add")


def sub(a: Node, b: Node) -> Node:
    broadcast = _is_row_broadcast(a, b)
    if not broadcast:
        _require_same_shape(a, b, "sub")
    value = a.value - b.value

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad)
        _accumulate(b, -(grad.sum(axis=0, keepdims=True) if broadcast else grad))

    return _result(value, (a, b), backward, "sub")


def mul(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "mul")
    value = a.value * b.value

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad * b.value)
        _accumulate(b, grad * a.value)

    return _result(value, (a, b), backward, "mul")


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    value = a.value * factor

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad * factor)

    return _result(value, (a,), backward, "scale")


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    value = np.where(mask, a.value, 0.0)

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad * mask)

    return _result(value, (a,), backward, "relu")


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad * (1.0 - value * value))

    return _result(value, (a,), backward, "tanh")


def soft_clip(a: Node, limit: float) -> Node:
    """limit * tanh(a / limit): identity near zero, bounded by ±limit."""
    inner = np.tanh(a.value / limit)
    value = limit * inner

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad * (1.0 - inner * inner))

    return _result(value, (a,), backward, "soft_clip")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        value = np.exp(a.value)

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad * value)

    return _result(value, (a,), backward, "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise NumericalError("log: input must be strictly positive")
    value = np.log(a.value)

    def backward(grad: Matrix) -> None:
        _accumulate(a, grad / a.value)

    return _result(value, (a,), backward, "log")


def _check_axis(axis: int | None, op: str) -> None:
    if axis not in (None, 0, 1):
        raise ShapeError(f"{op}: axis must be None, 0 or 1, got {axis}")


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    _check_axis(axis, "sum")
    if axis is None:
        value = np.array([[a.value.sum()]])
    else:
        value = a.value.sum(axis=axis, keepdims=True)

    def backward(grad: Matrix) -> None:
        _accumulate(a, np.broadcast_to(grad, a.shape))

    return _result(value, (a,), backward, "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    _check_axis(axis, "mean")
    count = a.value.size if axis is None else a.shape[axis]
    if axis is None:
        value = np.array([[a.value.mean()]])
    else:
        value = a.value.mean(axis=axis, keepdims=True)

    def backward(grad: Matrix) -> None:
        _accumulate(a, np.broadcast_to(grad, a.shape) / count)

    return _result(value, (a,), backward, "mean")


def logsumexp(a: Node, axis: int | None = None) -> Node:
    _check_axis(axis, "logsumexp")
    if axis is None:
        peak = a.value.max()
        value = np.array([[peak + np.log(np.exp(a.value - peak).sum())]])
    else:
        peak = a.value.max(axis=axis, keepdims=True)
        value = peak + np.log(np.exp(a.value - peak).sum(axis=axis, keepdims=True))

    def backward(grad: Matrix) -> None:
        weights = np.exp(a.value - value)
        _accumulate(a, np.broadcast_to(grad, a.shape) * weights)

    return _result(value, (a,), backward, "logsumexp")


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    if not nodes:
        raise ShapeError("concat: no inputs")
    other = 1 - axis
    for node in nodes[1:]:
        if node.shape[other] != nodes[0].shape[other]:
            raise ShapeError(
                f"concat: shape mismatch {nodes[0].shape} vs {node.shape} along axis {axis}"
            )
    value = np.concatenate([node.value for node in nodes], axis=axis)
    bounds = np.cumsum([0] + [node.shape[axis] for node in nodes])

    def backward(grad: Matrix) -> None:
        for node, start, stop in zip(nodes, bounds[:-1], bounds[1:]):
            if axis == 1:
                _accumulate(node, grad[:, start:stop])
            else:
                _accumulate(node, grad[start:stop, :])

    return _result(value, tuple(nodes), backward, "concat")


def take_rows(a: Node, index: np.ndarray) -> Node:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"take_rows: index must be 1-d, got shape {index.shape}")
    value = a.value[index]

    def backward(grad: Matrix) -> None:
        scattered = np.zeros_like(a.value)
        np.add.at(scattered, index, grad)
        _accumulate(a, scattered)

    return _result(value, (a,), backward, "take_rows")


def softmax_cross_entropy(
    logits: Node,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> Node:
    """Weighted sum of per-row cross-entropies; default weights are 1/n (the mean)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_rows, n_classes = logits.shape
    if labels.shape[0] != n_rows:
        raise ShapeError(
            f"softmax_cross_entropy: shape mismatch {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"softmax_cross_entropy: labels out of range for {n_classes} classes")
    if weights is None:
        weights = np.full(n_rows, 1.0 / n_rows)
    else:
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != n_rows:
            raise ShapeError(
                f"softmax_cross_entropy: shape mismatch {logits.shape} vs weights {weights.shape}"
            )
    peak = logits.value.max(axis=1, keepdims=True)
    shifted = logits.value - peak
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n_rows)
    per_row = -log_probs[rows, labels]
    value = np.array([[np.dot(weights, per_row)]])

    def backward(grad: Matrix) -> None:
        local = np.exp(log_probs)
        local[rows, labels] -= 1.0
        _accumulate(logits, grad[0, 0] * weights[:, None] * local)

    return _result(value, (logits,), backward, "softmax_cross_entropy")


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, Matrix]:
    """Backpropagate from a scalar root; returns gradients of every requires_grad node."""
    if root.shape != (1, 1):
        raise ShapeError(f"backward: root must be 1x1, got {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    if not root.requires_grad:
        return {}
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {node: node.grad for node in order if node.requires_grad and node.grad is not None}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[Node, Matrix] = field(default_factory=dict)
    second_moment: dict[Node, Matrix] = field(default_factory=dict)


def adam_step(
    params: Iterable[Node],
    grads: Mapping[Node, Matrix],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam update with decoupled weight decay; parameters are replaced, moments updated in place."""
    params = list(params)
    for param in params:
        grad = grads.get(param)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"adam_step: shape mismatch {param.shape} vs {grad.shape} for {param.name}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter '{param.name}'")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param in params:
        grad = grads.get(param)
        if grad is None:
            grad = np.zeros_like(param.value)
        m = state.first_moment.get(param)
        v = state.second_moment.get(param)
        if m is None:
            m = np.zeros_like(param.value)
            v = np.zeros_like(param.value)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[param] = m
        state.second_moment[param] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.value = param.value - lr * (update + weight_decay * param.value)
    return state


@dataclass(frozen=True)
class RngState:
    """Counter-based random stream keyed by (seed, path); identical keys give identical streams."""

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(int(key) < 0 for key in self.path):
            raise ValueError(f"stream keys must be non-negative, got {self.path}")

    def child(self, *keys: int) -> "RngState":
        return RngState(self.seed, self.path + tuple(int(key) for key in keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(sequence))


def ensure_generator(rng: RngState | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, RngState):
        return rng.generator()
    return rng


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Matrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


_ACTIVATIONS = {"tanh": tanh, "relu": relu}


class MLP:
    """Fully connected network; hidden layers use `activation`, output is linear unless final_activation."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: RngState | np.random.Generator,
        *,
        activation: str = "tanh",
        final_activation: bool = False,
        name: str = "mlp",
    ) -> None:
        if len(sizes) < 2 or any(int(size) < 1 for size in sizes):
            raise ValueError(f"MLP sizes must list at least two positive widths, got {list(sizes)}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.sizes = tuple(int(size) for size in sizes)
        self.activation = activation
        self.final_activation = final_activation
        self.name = name
        self.weights: list[Node] = []
        self.biases: list[Node] = []
        self.reinitialize(rng)

    def reinitialize(self, rng: RngState | np.random.Generator) -> None:
        generator = ensure_generator(rng)
        self.weights = []
        self.biases = []
        for index, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.weights.append(
                parameter(glorot_uniform(generator, fan_in, fan_out), f"{self.name}.w{index}")
            )
            self.biases.append(parameter(np.zeros((1, fan_out)), f"{self.name}.b{index}"))

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: Node) -> Node:
        if x.cols != self.input_dim:
            raise ShapeError(f"{self.name}: shape mismatch {x.shape} vs input width {self.input_dim}")
        act = _ACTIVATIONS[self.activation]
        hidden = x
        last = len(self.weights) - 1
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            hidden = add(matmul(hidden, weight), bias)
            if index < last or self.final_activation:
                hidden = act(hidden)
        return hidden

    def parameters(self) -> list[Node]:
        params: list[Node] = []
        for weight, bias in zip(self.weights, self.biases):
            params.extend((weight, bias))
        return params

    def state_dict(self) -> dict[str, Matrix]:
        return {param.name: param.value.copy() for param in self.parameters()}

    def load_state_dict(self, state: Mapping[str, Matrix]) -> None:
        for param in self.parameters():
            if param.name not in state:
                raise ValueError(f"{self.name}: missing parameter '{param.name}'")
            value = as_matrix(state[param.name], param.name)
            if value.shape != param.shape:
                raise ShapeError(
                    f"{self.name}: shape mismatch {param.shape} vs {value.shape} for '{param.name}'"
                )
            param.value = value.copy()

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for param in self.parameters():
            digest.update(param.value.tobytes())
        return digest.hexdigest()
