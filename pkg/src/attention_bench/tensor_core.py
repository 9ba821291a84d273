"""Dense tensor engine with reverse-mode differentiation and built-in accounting.

Every numeric operation in the package goes through this module, so the FLOP
counter and the allocation tracker of the active :class:`Instrumentation` see
all of it. Storage is a contiguous row-major numpy array and every operation
returns a fresh array (no strided views), which keeps the allocation
high-water mark meaningful.

FLOP cost convention (per output element unless stated otherwise):

=========================================  ==========================================
operation                                  cost
=========================================  ==========================================
matmul (m x k) . (k x n)                   2*m*n*k per batch entry
add, mul, div, scale                       1
relu                                       1 (compare)
gelu (tanh approximation)                  9
softmax over the last dim                  5 per element (compare, sub, exp, sum, div)
layernorm                                  7 per element + 2 per row (sqrt, reciprocal)
cross_entropy                              4 per logit + 2 per counted row
reduce_sum, cumsum, argmax                 1 per input element
reshape, permute, slice, concat, take      0
embedding_lookup                           0
=========================================  ==========================================

Backward passes use the same table; their costs are documented on each op.
"""

import contextvars
import hashlib
import logging
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from attention_bench.exceptions import (
    ConfigError,
    DataError,
    DimensionError,
    GraphError,
    NumericalError,
)

logger = logging.getLogger(__name__)

FLOP_CATEGORIES = ("matmul", "softmax", "elementwise", "norm")

FLOP_COSTS = {
    "add": 1,
    "mul": 1,
    "div": 1,
    "scale": 1,
    "relu": 1,
    "gelu": 9,
    "softmax": 5,
    "layernorm": 7,
    "layernorm_row": 2,
    "cross_entropy": 4,
    "cross_entropy_row": 2,
    "reduce": 1,
    "argmax": 1,
}

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray, np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class FlopCounter:
    """Monotonic FLOP counter, split by operation category and by active scope."""

    total: int = 0
    by_category: Dict[str, int] = field(
        default_factory=lambda: dict.fromkeys(FLOP_CATEGORIES, 0)
    )
    by_scope: Dict[str, int] = field(default_factory=dict)
    _scopes: List[str] = field(default_factory=list, repr=False)

    def add(self, category: str, count: int) -> None:
        """Record ``count`` FLOPs of ``category`` against every active scope.

        Args:
            category (str): One of ``FLOP_CATEGORIES``.
            count (int): Number of floating point operations, non-negative.

        Raises:
            ValueError: If the category is unknown or the count is negative.
        """
        if category not in self.by_category:
            raise ValueError(f"Unknown FLOP category '{category}'.")
        count = int(count)
        if count < 0:
            raise ValueError("FLOP counts cannot be negative.")
        self.total += count
        self.by_category[category] += count
        for name in dict.fromkeys(self._scopes):
            self.by_scope[name] = self.by_scope.get(name, 0) + count

    @contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scopes.append(name)
        self.by_scope.setdefault(name, 0)
        try:
            yield
        finally:
            self._scopes.pop()

    def snapshot(self) -> Dict[str, int]:
        """Flat copy of the counters, handy for computing deltas."""
        return {
            "total": self.total,
            **{f"category.{k}": v for k, v in self.by_category.items()},
            **{f"scope.{k}": v for k, v in self.by_scope.items()},
        }


@dataclass
class AllocWindow:
    """High-water marks observed while a :meth:`AllocTracker.window` is open."""

    start_bytes: int
    peak_bytes: int
    peak_by_tag: Dict[str, int] = field(default_factory=dict)


class AllocTracker:
    """Tracks live and peak payload bytes of every tensor created in a run.

    Tensors register on creation and release through a ``weakref.finalize``
    hook, so ``live_bytes`` follows reference counting. Allocations created while
    a tag is active (see :meth:`tag`) are also accounted per tag.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.live_by_tag: Dict[str, int] = {}
        self.peak_by_tag: Dict[str, int] = {}
        self._tags: List[str] = []
        self._windows: List[AllocWindow] = []
        self._lock = threading.Lock()

    @property
    def current_tag(self) -> Optional[str]:
        return self._tags[-1] if self._tags else None

    def allocate(self, nbytes: int, tag: Optional[str] = None) -> None:
        with self._lock:
            self.live_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            if tag is not None:
                live = self.live_by_tag.get(tag, 0) + nbytes
                self.live_by_tag[tag] = live
                self.peak_by_tag[tag] = max(self.peak_by_tag.get(tag, 0), live)
            for window in self._windows:
                window.peak_bytes = max(window.peak_bytes, self.live_bytes)
                if tag is not None:
                    window.peak_by_tag[tag] = max(
                        window.peak_by_tag.get(tag, 0), self.live_by_tag[tag]
                    )

    def release(self, nbytes: int, tag: Optional[str] = None) -> None:
        with self._lock:
            self.live_bytes -= nbytes
            if tag is not None:
                self.live_by_tag[tag] = self.live_by_tag.get(tag, 0) - nbytes

    @contextmanager
    def tag(self, name: str) -> Iterator[None]:
        """Attribute allocations made inside the block to ``name``."""
        self._tags.append(name)
        try:
            yield
        finally:
            self._tags.pop()

    @contextmanager
    def scratch(self, nbytes: int, tag: Optional[str] = None) -> Iterator[None]:
        """Account a transient buffer that is not a Tensor (fused kernels)."""
        tag = tag if tag is not None else self.current_tag
        self.allocate(nbytes, tag)
        try:
            yield
        finally:
            self.release(nbytes, tag)

    @contextmanager
    def window(self) -> Iterator[AllocWindow]:
        """Measure the high-water mark of a block without touching the run peak."""
        window = AllocWindow(start_bytes=self.live_bytes, peak_bytes=self.live_bytes)
        self._windows.append(window)
        try:
            yield window
        finally:
            self._windows.remove(window)


class Instrumentation:
    """Per-run owner of the FLOP counter, the allocation tracker and the precision.

    Use as a context manager; operations executed inside the block are counted.
    Outside any instrumentation operations still run, but nothing is counted.

    Args:
        dtype: Floating point type of every tensor created in the block. Defaults to float32.
        track_kinks (bool, optional): Hash every discrete decision (relu masks,
            LSH buckets) into :meth:`kink_signature`. Defaults to False.

    Examples:
        >>> with Instrumentation() as inst:
        ...     y = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        >>> inst.flops.total
        48
    """

    def __init__(self, dtype=np.float32, track_kinks: bool = False):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"Unsupported tensor dtype {self.dtype}.")
        self.flops = FlopCounter()
        self.alloc = AllocTracker()
        self.track_kinks = track_kinks
        self._kinks = hashlib.md5()
        self.notes: Dict[str, object] = {}
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Instrumentation":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def record_kink(self, decision: np.ndarray) -> None:
        if self.track_kinks:
            self._kinks.update(np.ascontiguousarray(decision).tobytes())

    def kink_signature(self) -> str:
        return self._kinks.hexdigest()


_ACTIVE: contextvars.ContextVar[Optional[Instrumentation]] = contextvars.ContextVar(
    "attention_bench_instrumentation", default=None
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "attention_bench_grad_enabled", default=True
)


def current_instrumentation() -> Optional[Instrumentation]:
    return _ACTIVE.get()


def current_dtype() -> np.dtype:
    inst = _ACTIVE.get()
    return inst.dtype if inst is not None else np.dtype(np.float32)


def count_flops(category: str, count: int) -> None:
    """Charge FLOPs to the active instrumentation, if any."""
    inst = _ACTIVE.get()
    if inst is not None and count:
        inst.flops.add(category, count)


def record_kink(decision: np.ndarray) -> None:
    inst = _ACTIVE.get()
    if inst is not None:
        inst.record_kink(decision)


@contextmanager
def flop_scope(name: str) -> Iterator[None]:
    inst = _ACTIVE.get()
    if inst is None:
        yield
        return
    with inst.flops.scope(name):
        yield


@contextmanager
def alloc_tag(name: str) -> Iterator[None]:
    inst = _ACTIVE.get()
    if inst is None:
        yield
        return
    with inst.alloc.tag(name):
        yield


@contextmanager
def scratch(nbytes: int, tag: Optional[str] = None) -> Iterator[None]:
    inst = _ACTIVE.get()
    if inst is None:
        yield
        return
    with inst.alloc.scratch(nbytes, tag):
        yield


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; results carry no parents and no grad."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """Dense row-major tensor with an optional gradient.

    Args:
        data: Anything ``numpy.array`` accepts; copied and cast to the active dtype.
        requires_grad (bool, optional): Track gradients for this leaf. Defaults to False.

    Raises:
        DimensionError: If any extent of the shape is zero.
        NumericalError: If the data holds NaN or Inf.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=current_dtype(), order="C", copy=True)
        _check_finite(arr, "tensor")
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"Tensor extents must be positive, got {arr.shape}.")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional["Tensor"] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._consumed = False
        inst = _ACTIVE.get()
        if inst is not None:
            tag = inst.alloc.current_tag
            inst.alloc.allocate(arr.nbytes, tag)
            weakref.finalize(self, inst.alloc.release, arr.nbytes, tag)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}.")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"Operation '{op}' produced NaN or Inf values.")


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def fused(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Optional[BackwardFn],
    op: str,
) -> Tensor:
    """Wrap the result of a kernel as a graph node.

    ``backward_fn(grad_out, out_data)`` must return one gradient (or None) per
    parent, in order. Kernels charge their own FLOPs with :func:`count_flops`.

    Args:
        data (np.ndarray): The freshly computed output buffer.
        parents (Sequence[Tensor]): Inputs the output depends on.
        backward_fn (Optional[BackwardFn]): Vector-Jacobian product of the kernel.
        op (str): Operation name used in error messages.

    Returns:
        Tensor: The wrapped output.
    """
    arr = np.ascontiguousarray(data, dtype=current_dtype())
    _check_finite(arr, op)
    parents = tuple(parents)
    requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out._init(arr, requires_grad)
    out._op = op
    if requires_grad and backward_fn is not None:
        out._parents = parents
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar loss.

    The recorded graph is released afterwards; a second call without a new
    forward pass is an error.

    Args:
        loss (Tensor): Scalar produced by tracked operations.

    Raises:
        GraphError: If the loss is not a scalar, does not require grad, or its
            graph was already consumed.
    """
    if loss.ndim != 0:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}.")
    if loss._consumed:
        raise GraphError(
            "The graph of this loss was already consumed; run the forward pass again."
        )
    if not loss.requires_grad:
        raise GraphError("The loss does not depend on any tensor that requires grad.")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        with flop_scope("backward"):
            for node in reversed(order):
                grad = grads.pop(id(node), None)
                if grad is None:
                    continue
                if node._backward is None:
                    _accumulate_leaf(node, grad)
                    continue
                parent_grads = node._backward(grad, node.data)
                for parent, parent_grad in zip(node._parents, parent_grads):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        count_flops("elementwise", parent_grad.size)
                        grads[key] = grads[key] + parent_grad
                    else:
                        grads[key] = parent_grad
    finally:
        for node in order:
            if node._backward is not None:
                node._consumed = True
            node._parents = ()
            node._backward = None


def _accumulate_leaf(node: Tensor, grad: np.ndarray) -> None:
    grad = np.ascontiguousarray(grad, dtype=node.dtype).reshape(node.shape)
    if node.grad is None:
        with no_grad():
            node.grad = Tensor.__new__(Tensor)
            node.grad._init(grad.copy(), False)
    else:
        count_flops("elementwise", grad.size)
        node.grad.data += grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    count_flops("elementwise", grad.size - int(np.prod(shape)))
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast together."
        ) from None


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise sum with numpy broadcasting. Backward: reductions only."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    count_flops("elementwise", out.size * FLOP_COSTS["add"])

    def _backward(grad, _):
        return (
            _unbroadcast(grad, a.shape) if a.requires_grad else None,
            _unbroadcast(grad, b.shape) if b.requires_grad else None,
        )

    return fused(out, (a, b), _backward, "add")


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise product with broadcasting. Backward: 1 FLOP per element per input."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data
    count_flops("elementwise", out.size * FLOP_COSTS["mul"])

    def _backward(grad, _):
        grad_a = grad_b = None
        if a.requires_grad:
            count_flops("elementwise", grad.size)
            grad_a = _unbroadcast(grad * b.data, a.shape)
        if b.requires_grad:
            count_flops("elementwise", grad.size)
            grad_b = _unbroadcast(grad * a.data, b.shape)
        return grad_a, grad_b

    return fused(out, (a, b), _backward, "mul")


def div(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise quotient with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    count_flops("elementwise", out.size * FLOP_COSTS["div"])

    def _backward(grad, out_data):
        grad_a = grad_b = None
        if a.requires_grad:
            count_flops("elementwise", grad.size)
            grad_a = _unbroadcast(grad / b.data, a.shape)
        if b.requires_grad:
            count_flops("elementwise", 3 * grad.size)
            grad_b = _unbroadcast(-grad * out_data / b.data, b.shape)
        return grad_a, grad_b

    return fused(out, (a, b), _backward, "div")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    out = x.data * factor
    count_flops("elementwise", out.size * FLOP_COSTS["scale"])

    def _backward(grad, _):
        count_flops("elementwise", grad.size)
        return (grad * factor,)

    return fused(out, (x,), _backward, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_kink(mask)
    out = np.where(mask, x.data, 0)
    count_flops("elementwise", out.size * FLOP_COSTS["relu"])

    def _backward(grad, _):
        count_flops("elementwise", grad.size)
        return (grad * mask,)

    return fused(out, (x,), _backward, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GPT-2 tanh approximation of GELU."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u**3)
    tanh = np.tanh(inner)
    out = 0.5 * u * (1.0 + tanh)
    count_flops("elementwise", out.size * FLOP_COSTS["gelu"])

    def _backward(grad, _):
        count_flops("elementwise", 12 * grad.size)
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u**2)
        local = 0.5 * (1.0 + tanh) + 0.5 * u * (1.0 - tanh**2) * d_inner
        return (grad * local,)

    return fused(out, (x,), _backward, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, leading axes broadcast.

    Cost: 2*m*n*k per batch entry forward, the same per required input backward.

    Raises:
        DimensionError: If the inner dimensions disagree or the batch axes do not broadcast.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: shapes {a.shape} and {b.shape} are not aligned for a matrix product."
        )
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch axes of {a.shape} and {b.shape} cannot be broadcast."
        ) from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    cost = 2 * m * n * k * int(np.prod(batch, dtype=np.int64))
    out = np.matmul(a.data, b.data)
    count_flops("matmul", cost)

    def _backward(grad, _):
        grad_a = grad_b = None
        if a.requires_grad:
            count_flops("matmul", cost)
            grad_a = _unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            count_flops("matmul", cost)
            grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.shape)
        return grad_a, grad_b

    return fused(out, (a, b), _backward, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (max subtraction).

    Raises:
        DimensionError: For a 0-d tensor, which has no last dimension.
    """
    if x.ndim == 0:
        raise DimensionError("softmax_lastdim needs at least one dimension.")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=-1, keepdims=True)
    count_flops("softmax", out.size * FLOP_COSTS["softmax"])

    def _backward(grad, out_data):
        count_flops("softmax", 4 * grad.size)
        dot = (grad * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (grad - dot),)

    return fused(out, (x,), _backward, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift.

    Raises:
        ConfigError: If ``eps`` is not positive.
        DimensionError: If gain or bias do not match the last dimension.
    """
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be positive, got {eps}.")
    width = x.shape[-1] if x.ndim else 0
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}."
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data
    rows = x.size // width
    count_flops(
        "norm", x.size * FLOP_COSTS["layernorm"] + rows * FLOP_COSTS["layernorm_row"]
    )

    def _backward(grad, _):
        count_flops("norm", 10 * grad.size)
        reduce_axes = tuple(range(grad.ndim - 1))
        grad_gain = (grad * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        grad_bias = grad.sum(axis=reduce_axes) if bias.requires_grad else None
        grad_x = None
        if x.requires_grad:
            gxhat = grad * gain.data
            grad_x = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return grad_x, grad_gain, grad_bias

    return fused(out, (x, gain, bias), _backward, "layernorm")


def cross_entropy(
    logits: Tensor, targets: ArrayLike, ignore_index: Optional[int] = None
) -> Tensor:
    """Mean cross-entropy over positions whose target is not ``ignore_index``.

    Args:
        logits (Tensor): Scores of shape ``(..., vocab)``.
        targets (ArrayLike): Integer classes of shape ``logits.shape[:-1]``.
        ignore_index (Optional[int], optional): Target value excluded from the mean. Defaults to None.

    Raises:
        DimensionError: If targets do not match the logits' leading shape.
        DataError: If every target is ignored or a target is out of range.

    Returns:
        Tensor: Scalar loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim < 1 or targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}."
        )
    vocab = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    valid = (
        flat_targets != ignore_index
        if ignore_index is not None
        else np.ones(flat_targets.shape, bool)
    )
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("cross_entropy: every target is ignored.")
    picked = flat_targets[valid]
    if picked.min() < 0 or picked.max() >= vocab:
        raise DataError(f"cross_entropy: target out of range for vocabulary {vocab}.")

    row_max = flat_logits.max(axis=-1, keepdims=True)
    exps = np.exp(flat_logits - row_max)
    sums = exps.sum(axis=-1, keepdims=True)
    log_z = np.log(sums) + row_max
    rows = np.nonzero(valid)[0]
    losses = log_z[rows, 0] - flat_logits[rows, picked]
    out = np.asarray(losses.sum() / n_valid)
    count_flops(
        "softmax",
        flat_logits.size * FLOP_COSTS["cross_entropy"]
        + n_valid * FLOP_COSTS["cross_entropy_row"],
    )

    def _backward(grad, _):
        count_flops("softmax", 3 * flat_logits.size)
        probs = exps / sums
        probs[rows, picked] -= 1.0
        probs *= (valid[:, None] / n_valid) * grad
        return (probs.reshape(logits.shape),)

    return fused(out, (logits,), _backward, "cross_entropy")


def reduce_sum(
    x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    count_flops("elementwise", x.size * FLOP_COSTS["reduce"])

    def _backward(grad, _):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape).copy(),)

    return fused(out, (x,), _backward, "sum")


def cumsum(x: Tensor, axis: int) -> Tensor:
    """Inclusive prefix sum along ``axis``. Backward: reverse prefix sum."""
    out = np.cumsum(x.data, axis=axis)
    count_flops("elementwise", x.size * FLOP_COSTS["reduce"])

    def _backward(grad, _):
        count_flops("elementwise", grad.size)
        flipped = np.flip(grad, axis=axis)
        return (np.flip(np.cumsum(flipped, axis=axis), axis=axis).copy(),)

    return fused(out, (x,), _backward, "cumsum")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    leading = {t.shape[:-1] for t in tensors}
    if len(leading) != 1:
        raise DimensionError(
            f"concat_lastdim: leading shapes differ: {[t.shape for t in tensors]}."
        )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def _backward(grad, _):
        return [part.copy() for part in np.split(grad, bounds, axis=-1)]

    return fused(out, tensors, _backward, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Copy of ``x[..., start:stop, ...]`` along ``axis``."""
    extent = x.shape[axis]
    if not 0 <= start < stop <= extent:
        raise DimensionError(
            f"slice [{start}:{stop}] out of bounds for axis {axis} of shape {x.shape}."
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index].copy()

    def _backward(grad, _):
        full = np.zeros_like(x.data)
        full[index] = grad
        return (full,)

    return fused(out, (x,), _backward, "slice")


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2 needs 2 or more dims, got {x.shape}.")
    out = np.swapaxes(x.data, -1, -2).copy()

    def _backward(grad, _):
        return (np.swapaxes(grad, -1, -2).copy(),)

    return fused(out, (x,), _backward, "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes.")
    out = np.transpose(x.data, axes).copy()
    inverse = tuple(np.argsort(axes))

    def _backward(grad, _):
        return (np.transpose(grad, inverse).copy(),)

    return fused(out, (x,), _backward, "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape)).copy()
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}.") from None

    def _backward(grad, _):
        return (grad.reshape(x.shape).copy(),)

    return fused(out, (x,), _backward, "reshape")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with a shared index array (``numpy.take``).

    The indexed axis is replaced by the shape of ``indices``. Backward scatters
    with accumulation.
    """
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of {x.shape}.")
    out = np.take(x.data, indices, axis=axis)

    def _backward(grad, _):
        full = np.zeros_like(x.data)
        moved_full = np.moveaxis(full, axis, 0)
        index_axes = list(range(axis, axis + indices.ndim))
        moved_grad = np.moveaxis(grad, index_axes, list(range(indices.ndim)))
        moved_grad = moved_grad.reshape((indices.size,) + moved_full.shape[1:])
        np.add.at(moved_full, indices.reshape(-1), moved_grad)
        return (full,)

    return fused(out, (x,), _backward, "take")


def take_along_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Per-row gather (``numpy.take_along_axis``); indices broadcast against ``x``."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if indices.ndim != x.ndim:
        raise DimensionError(
            f"take_along_axis: indices {indices.shape} must have {x.ndim} dims like {x.shape}."
        )
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise DimensionError(
            f"take_along_axis: index out of range for axis {axis} of {x.shape}."
        )
    out = np.take_along_axis(x.data, indices, axis=axis)

    def _backward(grad, _):
        full = np.zeros_like(x.data)
        index = []
        for dim in range(grad.ndim):
            if dim == axis:
                index.append(np.broadcast_to(indices, grad.shape))
            else:
                shape = [1] * grad.ndim
                shape[dim] = grad.shape[dim]
                index.append(np.arange(grad.shape[dim]).reshape(shape))
        np.add.at(full, tuple(index), grad)
        return (full,)

    return fused(out, (x,), _backward, "take_along_axis")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of a ``(vocab, dim)`` table selected by integer ids.

    Raises:
        DataError: If an id is outside ``[0, vocab)``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"embedding_lookup: id out of range for vocabulary {vocab}.")
    out = table.data[ids]

    def _backward(grad, _):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, table.shape[-1]))
        return (full,)

    return fused(out, (table,), _backward, "embedding")


def argmax_lastdim(x: Tensor) -> np.ndarray:
    """Index of the largest element of each last-axis slice (not differentiable)."""
    count_flops("elementwise", x.size * FLOP_COSTS["argmax"])
    winners = np.argmax(x.data, axis=-1)
    record_kink(winners)
    return winners


def detach(x: Tensor) -> Tensor:
    with no_grad():
        return fused(x.data.copy(), (), None, "detach")
