"""A small reverse-mode automatic differentiation core over numpy arrays.

Only the operations the cost model needs are provided.  The LSTM cell and
the affine layer are single fused nodes with hand-written backward passes,
which keeps the graph (and the Python overhead) small.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def const(arr) -> Tensor:
    return Tensor(arr)


def _node(data, parents, fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, fn, True)
    return Tensor(data)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.backward_fn is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t.parents, t.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp


# -- ops ---------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = x.data @ w.data + b.data

    def fn(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(y, (x, w, b), fn)


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0)))

    def fn(g):
        return (g * np.where(pos, 1.0, y + 1.0),)

    return _node(y, (x,), fn)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)

    def fn(g):
        return (g * _sigmoid(x.data),)

    return _node(y, (x,), fn)


def lstm_cell(x: Tensor, hc: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """One LSTM step.  ``hc`` is the concatenated state [h, c]; gates are
    laid out (input, forget, cell, output) along the columns of ``w``."""
    hdim = hc.data.shape[1] // 2
    h, c = hc.data[:, :hdim], hc.data[:, hdim:]
    xh = np.concatenate([x.data, h], axis=1)
    z = xh @ w.data + b.data
    i = _sigmoid(z[:, :hdim])
    f = _sigmoid(z[:, hdim: 2 * hdim])
    gg = np.tanh(z[:, 2 * hdim: 3 * hdim])
    o = _sigmoid(z[:, 3 * hdim:])
    c2 = f * c + i * gg
    tc = np.tanh(c2)
    h2 = o * tc
    out = np.concatenate([h2, c2], axis=1)

    def fn(g):
        gh, gc = g[:, :hdim], g[:, hdim:]
        gc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc * gg * i * (1.0 - i),
            gc * c * f * (1.0 - f),
            gc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        gxh = dz @ w.data.T
        nx = x.data.shape[1]
        ghc = np.concatenate([gxh[:, nx:], gc * f], axis=1)
        return gxh[:, :nx], ghc, xh.T @ dz, dz.sum(axis=0)

    return _node(out, (x, hc, w, b), fn)


def concat(ts: list[Tensor]) -> Tensor:
    y = np.concatenate([t.data for t in ts], axis=1)
    widths = np.cumsum([0] + [t.data.shape[1] for t in ts])

    def fn(g):
        return [g[:, widths[k]: widths[k + 1]] for k in range(len(ts))]

    return _node(y, tuple(ts), fn)


def concat_rows(ts: list[Tensor]) -> Tensor:
    y = np.concatenate([t.data for t in ts], axis=0)
    heights = np.cumsum([0] + [t.data.shape[0] for t in ts])

    def fn(g):
        return [g[heights[k]: heights[k + 1]] for k in range(len(ts))]

    return _node(y, tuple(ts), fn)


def cols(x: Tensor, a: int, b: int) -> Tensor:
    def fn(g):
        out = np.zeros_like(x.data)
        out[:, a:b] = g
        return (out,)

    return _node(x.data[:, a:b], (x,), fn)


def rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), fn)


def blend(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise select: ``a`` where mask is 1, ``b`` where 0."""
    m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)

    def fn(g):
        return g * m, g * (1.0 - m)

    return _node(m * a.data + (1.0 - m) * b.data, (a, b), fn)


def mape(pred: Tensor, target: np.ndarray) -> Tensor:
    t = np.asarray(target, dtype=np.float64).reshape(pred.data.shape)
    d = pred.data - t
    n = d.size

    def fn(g):
        return (g * np.sign(d) / t / n,)

    return _node(np.array(np.mean(np.abs(d) / t)), (pred,), fn)
