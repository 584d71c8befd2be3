"""Minimal reverse-mode autodiff over numpy arrays.

Only the handful of ops the segmentation networks need are supported:
3x3 / 1x1 convolution (stride 1, same padding), ReLU, scaling, summation
and "external" nodes whose local gradients were computed elsewhere (the
distillation losses produce their own analytic gradients).
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the computation."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """A value in the recorded computation.

    ``parents`` and ``backward_fn`` are only populated when at least one
    input requires gradients, so inference through frozen weights records
    nothing.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value: np.ndarray, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if self.requires_grad:
            self.parents = tuple(parents)
            self.backward_fn = backward_fn
        else:
            self.parents = ()
            self.backward_fn = None

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        backward(self)


class Parameter(Node):
    """Trainable leaf. ``grad`` always has the value's shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray, requires_grad: bool = True):
        super().__init__(np.ascontiguousarray(value, dtype=np.float64))
        self.name = name
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.value.shape)})"


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(param) into every reachable Parameter.grad."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- convolution


def _check_conv(x, w, b, k):
    if x.ndim != 4:
        raise ValueError(f"conv input must be [B,C,H,W], got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (k, k):
        raise ValueError(f"expected weight [Cout,Cin,{k},{k}], got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")


def _im2col3(x: np.ndarray) -> np.ndarray:
    # rows ordered (ky, kx, cin); columns ordered (b, y, x)
    B, C, H, W = x.shape
    xp = np.zeros((C, B, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((3, 3, C, B, H, W))
    for i in range(3):
        for j in range(3):
            cols[i, j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(9 * C, B * H * W)


def _col2im3(dcols: np.ndarray, shape) -> np.ndarray:
    B, C, H, W = shape
    dcols = dcols.reshape(3, 3, C, B, H, W)
    dxp = np.zeros((C, B, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + H, j : j + W] += dcols[i, j]
    return dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)


def conv2d_3x3(x: Node, w: Node, b: Node) -> Node:
    """Same-padded, stride-1 3x3 cross-correlation on [B,Cin,H,W] input."""
    xv, wv, bv = x.value, w.value, b.value
    _check_conv(xv, wv, bv, 3)
    B, Cin, H, W = xv.shape
    Cout = wv.shape[0]
    cols = _im2col3(xv)
    wmat = wv.transpose(0, 2, 3, 1).reshape(Cout, 9 * Cin)
    out = (wmat @ cols).reshape(Cout, B, H, W).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out + bv[None, :, None, None])

    def backward_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(Cout, B * H * W)
        gx = _col2im3(wmat.T @ gm, xv.shape) if x.requires_grad else None
        gw = (gm @ cols.T).reshape(Cout, 3, 3, Cin).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=1)
        return gx, np.ascontiguousarray(gw), gb

    return Node(out, (x, w, b), backward_fn)


def conv2d_1x1(x: Node, w: Node, b: Node) -> Node:
    """Pointwise channel mixing; weight is [Cout,Cin,1,1]."""
    xv, wv, bv = x.value, w.value, b.value
    _check_conv(xv, wv, bv, 1)
    B, Cin, H, W = xv.shape
    Cout = wv.shape[0]
    wmat = wv.reshape(Cout, Cin)
    xm = xv.transpose(1, 0, 2, 3).reshape(Cin, B * H * W)
    out = (wmat @ xm).reshape(Cout, B, H, W).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out + bv[None, :, None, None])

    def backward_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(Cout, B * H * W)
        gx = None
        if x.requires_grad:
            gx = (wmat.T @ gm).reshape(Cin, B, H, W).transpose(1, 0, 2, 3)
        gw = (gm @ xm.T).reshape(Cout, Cin, 1, 1)
        return gx, gw, gm.sum(axis=1)

    return Node(out, (x, w, b), backward_fn)


def relu(x: Node) -> Node:
    mask = x.value > 0
    # derivative at exactly 0 is taken as 0
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- scalar glue


def scale(x: Node, s: float) -> Node:
    return Node(x.value * s, (x,), lambda g: (g * s,))


def add(*nodes: Node) -> Node:
    if len({n.value.shape for n in nodes}) != 1:
        raise ValueError("add needs identical shapes")
    out = nodes[0].value.copy()
    for n in nodes[1:]:
        out = out + n.value
    return Node(out, nodes, lambda g: tuple(g for _ in nodes))


def sum_all(x: Node) -> Node:
    return Node(np.array(x.value.sum()), (x,), lambda g: (np.full_like(x.value, g),))


def external(value: float, inputs: Sequence[Node], grads: Sequence[np.ndarray]) -> Node:
    """Scalar node with precomputed local gradients d(value)/d(input)."""
    grads = tuple(grads)
    for node, g in zip(inputs, grads):
        if g.shape != node.value.shape:
            raise ValueError(f"gradient shape {g.shape} != input shape {node.value.shape}")
    return Node(np.array(float(value)), tuple(inputs), lambda g: tuple(g * gi for gi in grads))


def weighted_sum(nodes: Sequence[Node], weights: Sequence[float]) -> Node:
    """Scalar sum_i w_i * node_i, accumulated left to right."""
    total = 0.0
    for n, w in zip(nodes, weights):
        total = total + w * float(n.value)
    weights = tuple(weights)
    return Node(np.array(total), tuple(nodes), lambda g: tuple(g * w for w in weights))

