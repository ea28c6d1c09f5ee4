"""Tape-based reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order; :func:`backward` walks the record in reverse. Outside a tape,
operations run as plain numpy calls and nothing is recorded, which is the
inference fast path.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from genq.errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense array with an optional gradient requirement.

    ``data`` is float32 unless ``dtype`` says otherwise; the gradient checks
    run the same graph in float64.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float32):
        arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from genq.nnkit import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from genq.nnkit import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from genq.nnkit import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from genq.nnkit import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from genq.nnkit import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from genq.nnkit import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from genq.nnkit import ops
        return ops.index(self, idx)

    def sum(self, axis=None, keepdims=False):
        from genq.nnkit import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from genq.nnkit import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from genq.nnkit import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from genq.nnkit import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(out_data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` as an op result, recording it if a tape is active."""
    parents = tuple(parents)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(out_data, dtype=None)
    out = Tensor(out_data, requires_grad=True, dtype=None)
    tape.nodes.append(_Node(out, parents, backward))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of scalar ``loss`` with respect to each of ``params``.

    Parameters that do not influence the loss get an all-zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    wanted = {id(p) for p in params}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            target = leaf_grads if key in wanted else grads
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    out = []
    for p in params:
        g = leaf_grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        out.append(g.reshape(p.shape).astype(p.dtype, copy=False))
    return out
