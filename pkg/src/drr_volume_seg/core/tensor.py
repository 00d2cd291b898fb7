"""
Reverse-mode autodiff tensor.

A ``Tensor`` wraps a numpy array and, when gradients are required, the closure
that propagates an output gradient back to its parents. Graphs are built
eagerly by the operations in ``functional`` and ``losses``; ``backward`` walks
them in reverse topological order.
"""

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from ..errors import ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference, validation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    N-d array with optional gradient.

    Layout is ``[batch, channel, depth, height, width]`` with trailing axes
    omitted for lower ranks. The element type is chosen at construction:
    ``float32`` for training, ``float64`` for gradient verification.

    Attributes:
        data: Underlying array. Treated as immutable once produced by an op.
        requires_grad: Whether gradients are accumulated for this tensor.
        grad: Accumulated gradient (same shape as ``data``) or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence],
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ):
        array = np.asarray(data, dtype=dtype if dtype is not None else None)
        if array.dtype.kind != "f":
            array = array.astype(np.float32)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    # ------------------------------------------------------------------ graph

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
    ) -> "Tensor":
        """
        Create the output of an operation.

        The backward closure receives the output gradient and returns one
        gradient (or None) per parent, in order.
        """
        needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=needs_grad)
        if needs_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate gradients of this tensor into every leaf that requires them.

        Args:
            grad: Seed gradient; defaults to ones (use on scalar losses).
        """
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        elif grad.shape != self.data.shape:
            raise ShapeError(f"Seed gradient shape {grad.shape} != tensor shape {self.shape}")

        pending: dict[int, np.ndarray] = {id(self): grad.astype(self.data.dtype, copy=False)}
        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node._accumulate(node_grad)
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = grad.astype(self.data.dtype, copy=False)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # ------------------------------------------------------------- properties

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    # ------------------------------------------------------------- arithmetic
    # Same-shape or scalar operands only; general broadcasting is not supported.

    def _check_same_shape(self, other: "Tensor", op: str) -> None:
        if self.shape != other.shape:
            raise ShapeError(f"{op}: shape mismatch {self.shape} vs {other.shape}")

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        if not isinstance(other, Tensor):
            value = float(other)
            return Tensor.from_op(self.data + value, (self,), lambda g: (g,))
        self._check_same_shape(other, "add")
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        if not isinstance(other, Tensor):
            return self + (-float(other))
        self._check_same_shape(other, "sub")
        return Tensor.from_op(self.data - other.data, (self, other), lambda g: (g, -g))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if not isinstance(other, Tensor):
            value = float(other)
            return Tensor.from_op(self.data * value, (self,), lambda g: (g * value,))
        self._check_same_shape(other, "mul")
        a, b = self.data, other.data
        return Tensor.from_op(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.shape
        return Tensor.from_op(
            np.asarray(self.data.sum()),
            (self,),
            lambda g: (np.broadcast_to(g, shape).copy(),),
        )

    def mean(self) -> "Tensor":
        n = self.data.size
        return self.sum() * (1.0 / n)

    def reshape(self, *shape: int) -> "Tensor":
        original = self.shape
        return Tensor.from_op(
            self.data.reshape(*shape),
            (self,),
            lambda g: (g.reshape(original),),
        )

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad_flag})"


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """A leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True, name=name)
