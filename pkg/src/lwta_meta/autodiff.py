"""Tape-based reverse-mode differentiation over the fixed op set the
network needs.

Nodes hold eager numpy values; each recorded op registers a closure that
scatters the incoming adjoint into its parents. `backward` resets all
gradient buffers on entry (fresh accumulation per call) and walks the tape
in reverse creation order, which is a valid reverse-topological order by
construction. Gradients through sampled noise (Gumbel perturbations,
Gaussian epsilons) are pathwise: the noise enters as constant leaves.

Only first-order gradients are supported.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, GraphError


class Node:
    __slots__ = ("value", "parents", "op_tag", "grad", "trainable", "_backward", "tape")

    def __init__(self, value, parents, op_tag, tape, trainable=False, backward_fn=None):
        self.value = value
        self.parents = parents
        self.op_tag = op_tag
        self.tape = tape
        self.trainable = trainable
        self.grad = None
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op_tag}, shape={self.value.shape})"


class Tape:
    """Ordered record of nodes; single-threaded, one graph per tape."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, trainable=False, tag="leaf") -> Node:
        node = Node(np.asarray(value), (), tag, self, trainable=trainable)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, trainable=False, tag="const")

    def record(self, op_tag: str, parents: Sequence[Node], value,
               backward_fn: Optional[Callable] = None) -> Node:
        for p in parents:
            if p.tape is not self:
                raise GraphError(f"node {p!r} belongs to a different tape")
        node = Node(np.asarray(value), tuple(parents), op_tag, self,
                    backward_fn=backward_fn)
        self.nodes.append(node)
        return node


def backward(loss: Node) -> None:
    """Populate `grad` on every node reachable from `loss`.

    Non-trainable leaves end with zero gradient (they are detached by
    contract even though adjoints may flow into them transiently).
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    for n in tape.nodes:
        n.grad = np.zeros_like(n.value)
    loss.grad = np.ones_like(loss.value)
    seen_loss = False
    for n in reversed(tape.nodes):
        if n is loss:
            seen_loss = True
        if not seen_loss or n._backward is None:
            continue
        if np.all(n.grad == 0):
            continue
        n._backward(n.grad)
    for n in tape.nodes:
        if not n.parents and not n.trainable:
            n.grad = np.zeros_like(n.value)


# --- elementwise / structural ops --------------------------------------------

def _unbroadcast(g, shape):
    """Sum an adjoint down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    v = a.value + b.value

    def bw(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)
    return a.tape.record("add", (a, b), v, bw)


def sub(a: Node, b: Node) -> Node:
    v = a.value - b.value

    def bw(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad -= _unbroadcast(g, b.value.shape)
    return a.tape.record("sub", (a, b), v, bw)


def mul(a: Node, b: Node) -> Node:
    v = a.value * b.value

    def bw(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)
    return a.tape.record("mul", (a, b), v, bw)


def scale(a: Node, c: float) -> Node:
    v = a.value * c

    def bw(g):
        a.grad += g * c
    return a.tape.record("scale", (a,), v, bw)


def add_const(a: Node, c) -> Node:
    c = np.asarray(c)
    v = a.value + c

    def bw(g):
        a.grad += _unbroadcast(g, a.value.shape)
    return a.tape.record("add_const", (a,), v, bw)


def mul_const(a: Node, c) -> Node:
    """Multiply by a constant mask/array (no gradient through c)."""
    c = np.asarray(c)
    v = a.value * c

    def bw(g):
        a.grad += _unbroadcast(g * c, a.value.shape)
    return a.tape.record("mul_const", (a,), v, bw)


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def log(a: Node) -> Node:
    v = np.log(a.value)

    def bw(g):
        a.grad += g / a.value
    return a.tape.record("log", (a,), v, bw)


def exp(a: Node) -> Node:
    v = np.exp(a.value)

    def bw(g):
        a.grad += g * v
    return a.tape.record("exp", (a,), v, bw)


def tanh(a: Node) -> Node:
    v = np.tanh(a.value)

    def bw(g):
        a.grad += g * (1.0 - v * v)
    return a.tape.record("tanh", (a,), v, bw)


def relu(a: Node) -> Node:
    v = np.maximum(a.value, 0.0)

    def bw(g):
        a.grad += g * (a.value > 0)
    return a.tape.record("relu", (a,), v, bw)


def clip_min(a: Node, floor: float) -> Node:
    """max(a, floor); adjoint passes only where a is above the floor."""
    v = np.maximum(a.value, floor)

    def bw(g):
        a.grad += g * (a.value >= floor)
    return a.tape.record("clip_min", (a,), v, bw)


def reshape(a: Node, shape) -> Node:
    v = a.value.reshape(shape)

    def bw(g):
        a.grad += g.reshape(a.value.shape)
    return a.tape.record("reshape", (a,), v, bw)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = nodes[0].tape
    v = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]

    def bw(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for n, p in zip(nodes, pieces):
            n.grad += p
    return tape.record("concat", tuple(nodes), v, bw)


def gather_rows(a: Node, idx) -> Node:
    """a[arange(N), idx] for a of shape (N, C); idx is a constant int array."""
    idx = np.asarray(idx)
    rows = np.arange(a.value.shape[0])
    v = a.value[rows, idx]

    def bw(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, (rows, idx), g)
        a.grad += buf
    return a.tape.record("gather_rows", (a,), v, bw)


def sum_all(a: Node) -> Node:
    v = np.asarray(a.value.sum())

    def bw(g):
        a.grad += g * np.ones_like(a.value)
    return a.tape.record("sum", (a,), v, bw)


def mean_all(a: Node) -> Node:
    v = np.asarray(a.value.mean())
    n = a.value.size

    def bw(g):
        a.grad += (g / n) * np.ones_like(a.value)
    return a.tape.record("mean", (a,), v, bw)


def matmul(a: Node, b: Node) -> Node:
    """(N,I) @ (I,O) -> (N,O); also covers (I,) @ (I,O) -> (O,)."""
    if a.value.shape[-1] != b.value.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    v = a.value @ b.value

    def bw(g):
        if a.value.ndim == 1:
            a.grad += b.value @ g
            b.grad += np.outer(a.value, g)
        else:
            a.grad += g @ b.value.T
            b.grad += a.value.T @ g
    return a.tape.record("matmul", (a, b), v, bw)


def matvec(w: Node, x: Node) -> Node:
    """Spec-shaped linear map: W (I,O), x (I,) -> (O,)."""
    return matmul(x, w)


def softmax(z: Node, axis: int = -1) -> Node:
    m = np.max(z.value, axis=axis, keepdims=True)
    e = np.exp(z.value - m)
    v = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * v, axis=axis, keepdims=True)
        z.grad += v * (g - dot)
    return z.tape.record("softmax", (z,), v, bw)


# --- composite ops used by the network ---------------------------------------

def gaussian_reparam(mu: Node, log_var: Node, eps, var_floor: float = -20.0) -> Node:
    """mu + exp(0.5 * max(log_var, floor)) * eps, with eps a constant draw."""
    lv = clip_min(log_var, var_floor)
    sigma = exp(scale(lv, 0.5))
    return add(mu, mul_const(sigma, np.asarray(eps)))


def gumbel_softmax(logits: Node, gumbel_noise, tau: float) -> Node:
    """softmax((logits + g) / tau) along the last axis; g is constant."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return softmax(scale(add_const(logits, np.asarray(gumbel_noise)), 1.0 / tau))


def cross_entropy(probs: Node, targets, floor: float = 1e-12) -> Node:
    """Mean negative log-probability of integer targets; probs floored
    before the log so saturated rows stay finite."""
    picked = gather_rows(probs, targets)
    return neg(mean_all(log(clip_min(picked, floor))))


def squared_error(pred: Node, targets) -> Node:
    """Mean squared error against a constant target array."""
    d = add_const(pred, -np.asarray(targets))
    return mean_all(mul(d, d))


# --- gradient checking --------------------------------------------------------

def grad_check(f, params, h: float = 1e-4):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a list of parameter Nodes (trainable leaves, shared tape) to a
    scalar loss Node, and must be deterministic across calls (freeze any
    noise outside). Parameters should be f64 for meaningful comparisons.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]

    def run(ps):
        tape = Tape()
        nodes = [tape.leaf(p, trainable=True) for p in ps]
        return nodes, f(nodes)

    nodes, loss = run(params)
    backward(loss)
    analytic = [n.grad.copy() for n in nodes]

    max_rel = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            _, lp = run(params)
            flat[i] = orig - h
            _, lm = run(params)
            flat[i] = orig
            numeric = (float(lp.value) - float(lm.value)) / (2.0 * h)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            max_rel = max(max_rel, err)
    return max_rel
