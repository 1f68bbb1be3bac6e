"""Dense differentiable tensors and the reverse-mode backward pass."""

from __future__ import annotations

import itertools
from typing import Any, Iterable, Mapping

import numpy as np

from unfoldldm.errors import GraphError, ShapeError

_node_ids = itertools.count()

# Inside ``no_grad`` blocks ops skip graph recording entirely.
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager disabling graph construction."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    """An n-dimensional array that records how it was produced.

    Leaves created with ``requires_grad=True`` are the trainable parameters;
    every tensor returned by an op keeps a reference to its parents and the
    context its backward rule needs.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    __slots__ = ("data", "grad", "requires_grad", "kind", "parents", "ctx", "node_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.kind: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: Any = None
        self.node_id = next(_node_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f", kind={self.kind}" if self.kind else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
    def __add__(self, other):
        from unfoldldm.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from unfoldldm.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from unfoldldm.tensor import ops
        return ops.sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        from unfoldldm.tensor import ops
        if isinstance(other, (int, float)):
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from unfoldldm.tensor import ops
        if isinstance(other, (int, float)):
            return ops.scalar_mul(self, 1.0 / float(other))
        return ops.div(self, other)

    def __neg__(self):
        from unfoldldm.tensor import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from unfoldldm.tensor import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from unfoldldm.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from unfoldldm.tensor import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        """Swap the last two axes."""
        from unfoldldm.tensor import ops
        return ops.swap_last(self)


def _not_scalar(t: Tensor):
    raise ShapeError("item", f"expected a single element, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


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
        for p in node.parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    When ``params`` is a mapping of path to leaf, returns a dict with one
    gradient array per path; parameters the loss does not reach get zeros.
    The graph is released afterwards and cannot be walked a second time.
    """
    from unfoldldm.tensor.ops import OPS

    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("this graph has already been used for a backward pass")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.kind is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        in_grads = OPS[node.kind].backward(g, node.ctx)
        for parent, pg in zip(node.parents, in_grads):
            if pg is None or not (parent.requires_grad or parent.kind is not None):
                continue
            if pg.shape != parent.shape:
                raise GraphError(
                    f"backward rule of {node.kind!r} produced grad of shape {pg.shape} "
                    f"for an input of shape {parent.shape}"
                )
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg

    for node in order:
        if node.kind is not None:
            node._consumed = True
            node.parents = ()
            node.ctx = None

    if params is None:
        return None
    if isinstance(params, Mapping):
        return {
            path: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for path, p in params.items()
        }
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
