"""
Dense float64 tensors with reverse-mode gradient accumulation.

Every differentiable operation is a :class:`Function` subclass with a ``forward``
on raw arrays and a ``backward`` that maps the upstream gradient to one gradient
per input. :func:`backward` visits the graph rooted at a scalar in descending
node-id order, which is a topological order because a node always receives a
larger id than its inputs.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import expit

from tempest.errors import DomainError, InvalidArgumentError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1

_node_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int]


class Function:
    """Base class for differentiable operations."""

    name = "function"

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors
        self.saved: Dict[str, object] = {}

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{self.name}: forward not implemented")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.name}: backward not implemented")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """A node in a computation graph holding a 1- to 4-D float64 array."""

    def __init__(self, data, requires_grad: bool = False, creator: Optional[Function] = None):
        array = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if array.dtype != np.float64:
            array = array.astype(np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        if array.ndim > 4:
            raise InvalidArgumentError(f"tensors have 1 to 4 extents, got shape {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, id={self.node_id})"

    # arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, Neg.apply(as_tensor(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(as_tensor(other), Neg.apply(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise InvalidArgumentError("division is only defined by a constant")
        return Mul.apply(self, as_tensor(1.0 / float(other)))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def leaky_relu(self) -> "Tensor":
        return LeakyRelu.apply(self)

    def square(self) -> "Tensor":
        return Square.apply(self)

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mean.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=tuple(shape))

    def backward(self) -> "Graph":
        return backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def parameter(data: np.ndarray) -> Tensor:
    """A leaf that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _check_binary(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise InvalidArgumentError(f"{name}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    return a.shape if a.size >= b.size else b.shape


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_binary(a, b, self.name)
        self.saved["shapes"] = (a.shape, b.shape)
        out = a + b
        return out.reshape(_broadcast_shape(a, b))

    def backward(self, grad):
        sa, sb = self.saved["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_binary(a, b, self.name)
        self.saved["ab"] = (a, b)
        out = a * b
        return out.reshape(_broadcast_shape(a, b))

    def backward(self, grad):
        a, b = self.saved["ab"]
        ga = grad * b if b.size == grad.size else grad * b.reshape(-1)[0]
        gb = grad * a if a.size == grad.size else grad * a.reshape(-1)[0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        self.saved["out"] = out
        return out

    def backward(self, grad):
        return (grad * self.saved["out"],)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError(f"log of non-positive value (min {a.min():.3g})")
        self.saved["a"] = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.saved["a"],)


class Softplus(Function):
    name = "softplus"

    def forward(self, a):
        self.saved["a"] = a
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * expit(self.saved["a"]),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        out = expit(a)
        self.saved["out"] = out
        return out

    def backward(self, grad):
        out = self.saved["out"]
        return (grad * out * (1.0 - out),)


class LeakyRelu(Function):
    name = "leaky_relu"

    def forward(self, a):
        slope = np.where(a > 0, 1.0, LEAKY_SLOPE)
        self.saved["slope"] = slope
        return a * slope

    def backward(self, grad):
        return (grad * self.saved["slope"],)


class Square(Function):
    name = "square"

    def forward(self, a):
        self.saved["a"] = a
        return a * a

    def backward(self, grad):
        return (2.0 * self.saved["a"] * grad,)


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.saved["shape"] = a.shape
        return np.array([a.sum()])

    def backward(self, grad):
        return (np.full(self.saved["shape"], grad.reshape(-1)[0]),)


class Mean(Function):
    name = "mean"

    def forward(self, a):
        self.saved["shape"] = a.shape
        return np.array([a.mean()])

    def backward(self, grad):
        shape = self.saved["shape"]
        return (np.full(shape, grad.reshape(-1)[0] / np.prod(shape)),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        if int(np.prod(shape)) != a.size:
            raise InvalidArgumentError(f"cannot reshape {a.shape} to {shape}")
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved["shape"]),)


class Conv2d(Function):
    """Cross-correlation of an NCHW input with an OCkk kernel plus optional per-channel bias."""

    name = "conv2d"

    def forward(self, x, w, b=None, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4:
            raise InvalidArgumentError(f"conv2d needs NCHW input and OCkk kernel, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, c_k, k, k2 = w.shape
        if c != c_k or k != k2 or k % 2 == 0:
            raise InvalidArgumentError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        if b is not None and b.shape != (o,):
            raise InvalidArgumentError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        if stride < 1 or pad < 0 or h + 2 * pad < k or wd + 2 * pad < k:
            raise InvalidArgumentError(f"conv2d: invalid stride {stride} / pad {pad} for input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        self.saved.update(windows=windows, w=w, xp_shape=xp.shape, x_shape=x.shape,
                          stride=stride, pad=pad, has_bias=b is not None)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        windows, w = self.saved["windows"], self.saved["w"]
        stride, pad = self.saved["stride"], self.saved["pad"]
        _, _, h, wd = self.saved["x_shape"]
        k = w.shape[2]
        ho, wo = grad.shape[2], grad.shape[3]
        gw = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(self.saved["xp_shape"])
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(w[:, :, i, j], grad, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, pad:pad + h, pad:pad + wd]
        if self.saved["has_bias"]:
            return gx, gw, grad.sum(axis=(0, 2, 3))
        return gx, gw


class UpsampleNearest2x(Function):
    name = "upsample_nearest2x"

    def forward(self, x):
        if x.ndim != 4:
            raise InvalidArgumentError(f"upsample needs NCHW input, got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


class Concat(Function):
    """Concatenation along the channel axis."""

    name = "concat"

    def forward(self, *arrays):
        if any(a.ndim != 4 or a.shape[2:] != arrays[0].shape[2:] for a in arrays):
            raise InvalidArgumentError(f"concat needs NCHW inputs of equal spatial size: {[a.shape for a in arrays]}")
        self.saved["splits"] = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.saved["splits"], axis=1))


class SelectChannel(Function):
    name = "select_channel"

    def forward(self, x, channel):
        self.saved.update(shape=x.shape, channel=channel)
        return x[:, channel:channel + 1].copy()

    def backward(self, grad):
        out = np.zeros(self.saved["shape"])
        c = self.saved["channel"]
        out[:, c:c + 1] = grad
        return (out,)


class StrideSelect(Function):
    """Keeps the top-left pixel of every factor x factor block of the last two axes."""

    name = "stride_select"

    def forward(self, x, factor):
        self.saved.update(shape=x.shape, factor=factor)
        return x[..., ::factor, ::factor].copy()

    def backward(self, grad):
        out = np.zeros(self.saved["shape"])
        f = self.saved["factor"]
        out[..., ::f, ::f] = grad
        return (out,)


class LinearMap(Function):
    """Applies a fixed (sparse or dense) matrix to the flattened input."""

    name = "linear_map"

    def forward(self, x, matrix, out_shape):
        if matrix.shape[1] != x.size:
            raise InvalidArgumentError(f"linear map expects {matrix.shape[1]} inputs, got {x.size}")
        self.saved.update(matrix=matrix, shape=x.shape)
        return np.asarray(matrix @ x.reshape(-1)).reshape(out_shape)

    def backward(self, grad):
        matrix = self.saved["matrix"]
        return (np.asarray(matrix.T @ grad.reshape(-1)).reshape(self.saved["shape"]),)


# Functional interface

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-D cross-correlation; the output extent is floor((H + 2*pad - k) / stride) + 1.

    Args:
        x: Input of shape [N, C, H, W]
        kernel: Kernel of shape [O, C, k, k] with odd k
        bias: Optional per-output-channel bias of shape [O]
        stride: Step between windows
        pad: Zero padding on every side

    Returns:
        Tensor of shape [N, O, H', W']
    """
    tensors = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv2d.apply(*tensors, stride=stride, pad=pad)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return UpsampleNearest2x.apply(x)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors)


def select_channel(x: Tensor, channel: int) -> Tensor:
    return SelectChannel.apply(x, channel=channel)


def stride_select(x: Tensor, factor: int) -> Tensor:
    return StrideSelect.apply(x, factor=factor)


def linear_map(x: Tensor, matrix: Union[np.ndarray, sparse.spmatrix], out_shape: Tuple[int, ...]) -> Tensor:
    return LinearMap.apply(x, matrix=matrix, out_shape=tuple(out_shape))


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "add": lambda a, b: Add.apply(a, b),
    "mul": lambda a, b: Mul.apply(a, b),
    "exp": lambda a: Exp.apply(a),
    "log": lambda a: Log.apply(a),
    "softplus": lambda a: Softplus.apply(a),
    "leaky_relu": lambda a: LeakyRelu.apply(a),
    "sigmoid": lambda a: Sigmoid.apply(a),
    "square": lambda a: Square.apply(a),
    "neg": lambda a: Neg.apply(a),
}

_BINARY = {"add", "mul"}


def elementwise(op_kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """
    Apply a named elementwise operation.

    Args:
        op_kind: One of add, mul, exp, log, softplus, leaky_relu, sigmoid, square, neg
        a: First operand
        b: Second operand for the binary kinds (equal shape or scalar)

    Returns:
        Result tensor carrying the operation's analytic gradient
    """
    if op_kind not in _ELEMENTWISE:
        raise InvalidArgumentError(f"unknown elementwise op {op_kind!r}")
    if op_kind in _BINARY:
        if b is None:
            raise InvalidArgumentError(f"{op_kind} needs two operands")
        return _ELEMENTWISE[op_kind](as_tensor(a), as_tensor(b))
    if b is not None:
        raise InvalidArgumentError(f"{op_kind} takes one operand")
    return _ELEMENTWISE[op_kind](as_tensor(a))


def reduce(op_kind: str, a: Tensor) -> Tensor:
    if op_kind == "sum":
        return Sum.apply(a)
    if op_kind == "mean":
        return Mean.apply(a)
    raise InvalidArgumentError(f"unknown reduction {op_kind!r}")


@dataclass
class NodeRecord:
    node_id: int
    op: str
    input_ids: List[int]


@dataclass
class Graph:
    """Node records of one backward pass in topological (ascending id) order."""

    nodes: List[NodeRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def _reachable(root: Tensor) -> List[Tensor]:
    seen: Dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen or not node.requires_grad:
            continue
        seen[node.node_id] = node
        if node.creator is not None:
            stack.extend(node.creator.tensors)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def backward(root: Tensor) -> Graph:
    """
    Populate ``grad`` of every tensor reachable from a scalar root.

    Leaves accumulate into their existing ``grad``; intermediate tensors are
    overwritten with the gradient of this pass.

    Args:
        root: A single-element tensor

    Returns:
        The graph that was traversed
    """
    if root.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    order = _reachable(root)
    grads: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    graph = Graph()
    for node in order:
        grad = grads.pop(node.node_id, None)
        inputs = node.creator.tensors if node.creator is not None else ()
        graph.nodes.append(NodeRecord(node.node_id, node.creator.name if node.creator else "leaf",
                                      [t.node_id for t in inputs]))
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        node.grad = grad
        for tensor, g in zip(inputs, node.creator.backward(grad)):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.node_id in grads:
                grads[tensor.node_id] = grads[tensor.node_id] + g
            else:
                grads[tensor.node_id] = g
    graph.nodes.reverse()
    return graph
