"""Minimal reverse-mode differentiation over numpy arrays.

Every op records a closure that maps the output gradient to input
gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Only the ops the alignment losses need are provided.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # -- graph plumbing ---------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, _parents=parents, _backward=backward)
        return Tensor(data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(a.data - b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        out = a.data / b.data
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * out / b.data, b.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def back(g):
            ad, bd = a.data, b.data
            if bd.ndim == 1:
                ga = g[..., None] * bd
                gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            elif ad.ndim == 1:
                ga = _unbroadcast((bd @ g[..., None])[..., 0], ad.shape)
                gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

        return Tensor._make(a.data @ b.data, (a, b), back)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def back(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.data[idx], (a,), back)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes) -> "Tensor":
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    def swapaxes(self, i: int, j: int) -> "Tensor":
        a = self
        return Tensor._make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self) -> "Tensor":
        a = self
        return Tensor._make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1 - out),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))

    def maximum(self, floor: float) -> "Tensor":
        a = self
        return Tensor._make(np.maximum(a.data, floor), (a,), lambda g: (g * (a.data >= floor),))

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(np.concatenate(datas, axis=axis), tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine between the rows of ``a`` (..., n, h) and ``b`` (..., m, h)."""
    return l2_normalize(a) @ l2_normalize(b).swapaxes(-1, -2)


def rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    return (l2_normalize(a) * l2_normalize(b)).sum(axis=-1)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return Tensor._make(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))
