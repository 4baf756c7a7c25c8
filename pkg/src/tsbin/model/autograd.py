"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the two networks need are provided. Every op records a
closure that pushes ``out.grad`` back into its parents; :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from ..dist import categorical_loss_and_grad, studentt_loss_and_grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        # never update in place: g may be another node's gradient buffer
        if self.grad is None:
            self.grad = np.broadcast_to(g, self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=float)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))
        return Tensor(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))
        return Tensor(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

        def back(g):
            full = np.zeros_like(a.data)
            if basic:  # no repeated positions, plain assignment suffices
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accumulate(full)
        return Tensor(a.data[idx], (a,), back)

    def reshape(self, *shape):
        a = self

        def back(g):
            a._accumulate(g.reshape(a.shape))
        return Tensor(a.data.reshape(*shape), (a,), back)

    def sum(self):
        a = self

        def back(g):
            a._accumulate(np.broadcast_to(g, a.shape))
        return Tensor(a.data.sum(), (a,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a 2-D weight and ``a`` has any leading dims."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        a._accumulate(g @ b.data.T)
        lead = a.data.reshape(-1, a.shape[-1])
        b._accumulate(lead.T @ g.reshape(-1, g.shape[-1]))
    return Tensor(a.data @ b.data, (a, b), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        a._accumulate(g * mask)
    return Tensor(a.data * mask, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        a._accumulate(g * (1 - y * y))
    return Tensor(y, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * a.data))

    def back(g):
        a._accumulate(g * y * (1 - y))
    return Tensor(y, (a,), back)


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)

    def back(g):
        a._accumulate(g * 0.5 * (1 + np.tanh(0.5 * a.data)))
    return Tensor(y, (a,), back)


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accumulate(piece)
    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def shift(a: Tensor, k: int) -> Tensor:
    """Delay ``a`` (shape ``(batch, T, C)``) by ``k`` steps along time, zero-filled."""
    if k == 0:
        return a
    out = np.zeros_like(a.data)
    out[:, k:] = a.data[:, :-k]

    def back(g):
        gg = np.zeros_like(a.data)
        gg[:, :-k] = g[:, k:]
        a._accumulate(gg)
    return Tensor(out, (a,), back)


def take(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
        table._accumulate(full)
    return Tensor(table.data[ids], (table,), back)


def categorical_nll(logits: Tensor, targets) -> Tensor:
    """Elementwise NLL, shape ``logits.shape[:-1]``; targets are 0-based ids."""
    loss, grad = categorical_loss_and_grad(logits.data, targets)

    def back(g):
        logits._accumulate(grad * g[..., None])
    return Tensor(loss, (logits,), back)


def studentt_nll(mu: Tensor, sigma: Tensor, nu: Tensor, z, series_scale) -> Tensor:
    loss, (d_mu, d_sigma, d_nu) = studentt_loss_and_grad(mu.data, sigma.data, nu.data, z,
                                                         series_scale)

    def back(g):
        mu._accumulate(g * d_mu)
        sigma._accumulate(g * d_sigma)
        nu._accumulate(g * d_nu)
    return Tensor(loss, (mu, sigma, nu), back)
