"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Tensors are immutable: every operation returns a new tensor that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the graph in reverse topological order and returns a
:class:`GradientMap` keyed by ``node_id``.

Shapes must match exactly; the only implicit broadcast is multiplication by a
Python scalar (:func:`scale`). Row-vector biases go through :func:`add_bias`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, InputError

__all__ = [
    "Tensor",
    "GradientMap",
    "tensor",
    "no_grad",
    "trace_relu",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "cos",
    "mean",
    "concat",
    "softmax",
    "layer_norm",
    "avg_pool1d",
]

_node_ids = itertools.count()
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Immutable n-d float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.node_id = next(_node_ids)
        out.name = None
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad, name=name)


class GradientMap(dict):
    """Mapping ``node_id -> gradient array``; also indexable by the tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().get(key, default)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for every tracked tensor in its graph."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return GradientMap()
    grads[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return GradientMap(grads)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., d] + b[d]``, the one explicitly allowed row broadcast."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: bias shape {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return Tensor._from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {x.shape}")
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape_in = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {shape_in} as {shape}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(shape_in),))


@contextmanager
def trace_relu():
    """Collect the boolean activation mask of every relu evaluated in the block."""
    masks: list[np.ndarray] = []
    prev = getattr(_state, "relu_masks", None)
    _state.relu_masks = masks
    try:
        yield masks
    finally:
        _state.relu_masks = prev


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    traced = getattr(_state, "relu_masks", None)
    if traced is not None:
        traced.append(mask)
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def cos(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over all elements, or over one axis (dropped)."""
    shape = x.shape
    if axis is None:
        n = x.size
        return Tensor._from_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"mean: axis {axis} invalid for shape {shape}")
    axis %= x.ndim
    n = shape[axis]

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=axis), (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; all other axes must agree."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} invalid for {ndim}-d tensors")
    axis %= ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def _bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), _bw)


def avg_pool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Mean over sliding windows along axis 0 of an ``[L, C]`` tensor, per channel."""
    if kernel < 1 or stride < 1:
        raise ContractError(f"avg_pool1d: kernel={kernel}, stride={stride} must be >= 1")
    if x.ndim != 2:
        raise DimensionError(f"avg_pool1d expects [L, C], got {x.shape}")
    length = x.shape[0]
    if length < kernel:
        raise InputError(f"avg_pool1d: input length {length} shorter than kernel {kernel}")
    n_out = (length - kernel) // stride + 1
    windows = sliding_window_view(x.data, kernel, axis=0)[::stride]
    out = windows.mean(axis=-1)
    shape = x.shape

    def _bw(g):
        gx = np.zeros(shape)
        share = g / kernel
        stop = stride * (n_out - 1) + 1
        for j in range(kernel):
            gx[j:j + stop:stride] += share
        return (gx,)

    return Tensor._from_op(out, (x,), _bw)


def leaves(named: Iterable[tuple[str, np.ndarray]], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap named arrays as leaf tensors."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in named}
