"""Reverse-mode automatic differentiation over dense numpy arrays.

Implements exactly the operation set the toy diffusion transformer needs:
matmul (with broadcast batch dims), softmax, exact-erf GELU, layer norm,
elementwise arithmetic, reshape/transpose/split, embedding lookup and
reductions. Graphs are built define-by-run; ``backward`` walks the tape in
reverse topological order with a fixed accumulation order, so gradients are
bit-reproducible. Tensors marked with ``retain_grad`` keep their gradient
after backward, which is how calibration taps observe intermediate values
without perturbing the forward pass.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True
_node_counter = 0


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense n-d array node in the compute graph.

    ``data`` is always a numpy array; construction of leaf tensors rejects
    NaN/Inf. Internal op results skip the finiteness check (softmax is
    max-subtracted, so overflow is guarded where it matters).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward",
                 "_retain", "node_id")

    def __init__(self, data, requires_grad: bool = False, check_finite: bool = True):
        global _node_counter
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if check_finite and not np.all(np.isfinite(arr)):
            raise ContractError("tensor construction rejects non-finite values")
        self.data = arr
        self.requires_grad = requires_grad and _grad_enabled
        self.grad = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._retain = False
        _node_counter += 1
        self.node_id = _node_counter

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), check_finite=False)


def _from_op(data: np.ndarray, op: str, parents: tuple, backward: Callable | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    global _node_counter
    out.data = data
    out.grad = None
    out.op = op
    out._retain = False
    _node_counter += 1
    out.node_id = _node_counter
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(grad, acc):
        acc(a, _unbroadcast(grad, a.data.shape))
        acc(b, _unbroadcast(grad, b.data.shape))

    return _from_op(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(grad, acc):
        acc(a, _unbroadcast(grad, a.data.shape))
        acc(b, _unbroadcast(-grad, b.data.shape))

    return _from_op(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(grad, acc):
        acc(a, _unbroadcast(grad * b.data, a.data.shape))
        acc(b, _unbroadcast(grad * a.data, b.data.shape))

    return _from_op(out_data, "mul", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul expects operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(grad, acc):
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        acc(a, _unbroadcast(ga, a.data.shape))
        acc(b, _unbroadcast(gb, b.data.shape))

    return _from_op(out_data, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w of shape (in_features, out_features)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(grad, acc):
        # dL/dx = y * (g - sum(g * y))
        inner = np.sum(grad * out_data, axis=axis, keepdims=True)
        acc(x, out_data * (grad - inner))

    return _from_op(out_data, "softmax", (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x). The tanh approximation is deliberately not used."""
    x = _as_tensor(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi_cdf

    def backward(grad, acc):
        pdf = np.exp(-0.5 * np.square(x.data)) * _INV_SQRT_2PI
        acc(x, grad * (phi_cdf + x.data * pdf))

    return _from_op(out_data, "gelu", (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part).

    Scale/shift conditioning is applied by the caller, which is where the
    adaLN modulation lives. ``eps`` guards zero-variance rows.
    """
    x = _as_tensor(x)
    mean = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(np.square(centered), axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv_std

    def backward(grad, acc):
        n = x.data.shape[-1]
        g_sum = np.sum(grad, axis=-1, keepdims=True)
        gx_sum = np.sum(grad * out_data, axis=-1, keepdims=True)
        acc(x, inv_std * (grad - g_sum / n - out_data * gx_sum / n))

    return _from_op(out_data, "layer_norm", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(grad, acc):
        acc(x, grad.reshape(x.data.shape))

    return _from_op(out_data, "reshape", (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(grad, acc):
        acc(x, np.transpose(grad, inverse))

    return _from_op(out_data, "transpose", (x,), backward)


def split(x: Tensor, parts: int, axis: int = -1) -> list[Tensor]:
    """Split into equal parts along ``axis``; gradients scatter back to slices."""
    x = _as_tensor(x)
    size = x.data.shape[axis]
    if size % parts != 0:
        raise DimensionError(f"cannot split axis of size {size} into {parts} parts")
    chunks = np.split(x.data, parts, axis=axis)
    outs = []
    step = size // parts
    for i, chunk in enumerate(chunks):
        def backward(grad, acc, i=i):
            full = np.zeros_like(x.data)
            sl = [slice(None)] * x.data.ndim
            sl[axis] = slice(i * step, (i + 1) * step)
            full[tuple(sl)] = grad
            acc(x, full)

        outs.append(_from_op(chunk, f"split{i}", (x,), backward))
    return outs


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def backward(grad, acc):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, grad)
        acc(table, full)

    return _from_op(out_data, "embedding", (table,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.asarray(np.sum(x.data))

    def backward(grad, acc):
        acc(x, np.broadcast_to(grad, x.data.shape).copy())

    return _from_op(out_data, "sum", (x,), backward)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.square(x.data)

    def backward(grad, acc):
        acc(x, grad * (2.0 * x.data))

    return _from_op(out_data, "square", (x,), backward)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False, check_finite=False)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar loss.

    Returns a map node_id -> gradient for every leaf with requires_grad and
    every tensor marked retain_grad; the same arrays are attached as ``.grad``.
    Accumulation visits nodes in reverse topological order, so the reduction
    order is fixed and results are bit-reproducible.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad or parent._retain:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}

    def acc(node: Tensor, g: np.ndarray):
        if not (node.requires_grad or node._retain):
            return
        if node.node_id in grads:
            grads[node.node_id] = grads[node.node_id] + g
        else:
            grads[node.node_id] = g

    result: dict[int, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.get(node.node_id)
        if g is None:
            continue
        if node._retain or (node.requires_grad and node._backward is None):
            node.grad = g
            result[node.node_id] = g
        if node._backward is not None:
            node._backward(g, acc)
    return result
