"""Reverse-mode differentiation over the tensor ops the model needs.

The graph is rebuilt on every forward pass: each op returns a fresh Node
holding its value, its parent nodes, and a closure that maps the output
adjoint to per-parent adjoints. ``backward`` walks the graph once in
reverse topological order and returns gradients for every named leaf.

All values are float64 numpy arrays. Ops accept raw arrays anywhere a Node
is expected and wrap them as unnamed constants.
"""

import math

import numpy as np

from . import kernels
from .errors import GraphError, NumericalError, ShapeError


class Node:
    __slots__ = ("value", "parents", "vjp", "name", "grad")

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or ("leaf" if not self.parents else "op")
        return f"Node({tag}, shape={self.value.shape})"


def leaf(value, name):
    """A named trainable leaf; ``backward`` reports its gradient."""
    return Node(value, name=name)


def const(value):
    """An unnamed leaf; gradients stop here silently."""
    return Node(value)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(g, shape):
    # reverse numpy broadcasting: sum out prepended axes, then size-1 axes
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Node(out, (a, b), vjp)


def sub(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Node(a.value - b.value, (a, b), vjp)


def neg(a):
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Node(a.value * b.value, (a, b), vjp)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(
            f"matmul expects ndim >= 2 operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def vjp(g):
        da = g @ b.value.swapaxes(-1, -2)
        db = a.value.swapaxes(-1, -2) @ g
        return _unbroadcast(da, a.value.shape), _unbroadcast(db, b.value.shape)

    return Node(out, (a, b), vjp)


def transpose(a, axes):
    a = as_node(a)
    inv = np.argsort(axes)
    return Node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    a = as_node(a)
    orig = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(nodes, axis):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), vjp)


def embedding(table, ids):
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    table = as_node(table)
    ids = np.asarray(ids)
    out = table.value[ids]

    def vjp(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (dt,)

    return Node(out, (table,), vjp)


def softmax(a):
    a = as_node(a)
    s = _softmax_last(a.value)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return Node(s, (a,), vjp)


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(a, valid):
    """Softmax over the last axis with invalid entries pinned to zero."""
    a = as_node(a)
    valid = np.asarray(valid, dtype=np.float64)
    flat = a.value.reshape(-1, a.value.shape[-1])
    vflat = np.broadcast_to(valid, a.value.shape).reshape(flat.shape)
    s = kernels.masked_softmax(np.ascontiguousarray(flat), np.ascontiguousarray(vflat))
    s = s.reshape(a.value.shape)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return Node(s, (a,), vjp)


def layernorm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = xhat * gain.value + bias.value

    def vjp(g):
        h = x.value.shape[-1]
        gdot = g * gain.value
        dx = (
            inv
            * (
                gdot
                - gdot.mean(axis=-1, keepdims=True)
                - xhat * (gdot * xhat).mean(axis=-1, keepdims=True)
            )
        )
        dgain = _unbroadcast(g * xhat, gain.value.shape)
        dbias = _unbroadcast(g, bias.value.shape)
        return dx, dgain, dbias

    return Node(out, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-form gelu; smooth everywhere, which keeps finite differences honest."""
    x = as_node(x)
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        return (g * dv,)

    return Node(out, (x,), vjp)


def mean_rows(x, mask):
    """Masked mean over the second-to-last axis; mask is a constant."""
    x = as_node(x)
    mask = np.asarray(mask, dtype=np.float64)
    if x.value.shape[:-1] != mask.shape:
        raise ShapeError(f"mean_rows mask {mask.shape} does not match x {x.value.shape}")
    den = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    out = (x.value * mask[..., None]).sum(axis=-2) / den

    def vjp(g):
        return ((g[..., None, :] * mask[..., None]) / den[..., None],)

    return Node(out, (x,), vjp)


def sum_all(x):
    x = as_node(x)
    shape = x.value.shape
    return Node(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def scale(x, c):
    x = as_node(x)
    c = float(c)
    return Node(x.value * c, (x,), lambda g: (g * c,))


def masked_nll(logits, targets, loss_mask):
    """Summed negative log-likelihood over mask-1 positions.

    Returns (loss_node, count) where count is the number of positions the
    sum ran over, so callers can report or optimize the per-token mean.
    """
    logits = as_node(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=np.float64)
    if logits.value.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"masked_nll shapes disagree: logits {logits.value.shape}, "
            f"targets {targets.shape}, mask {mask.shape}"
        )
    vsize = logits.value.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vsize):
        raise ShapeError(f"target id out of range for vocab {vsize}")
    flat = np.ascontiguousarray(logits.value.reshape(-1, vsize))
    tflat = np.ascontiguousarray(targets.reshape(-1))
    mflat = np.ascontiguousarray(mask.reshape(-1))
    loss, dflat = kernels.nll_fwd_bwd(flat, tflat, mflat)
    dfull = dflat.reshape(logits.value.shape)

    def vjp(g):
        return (g * dfull,)

    return Node(np.float64(loss), (logits,), vjp), int(mask.sum())


def stop_gradient(x):
    """Forward pass-through whose backward contribution is exactly zero."""
    x = as_node(x)
    return Node(x.value, (x,), lambda g: (np.zeros_like(x.value),))


def expert_mix(weights, stack):
    """Per-example weighted sum of a parameter stack.

    weights (b, n), stack (n, t, r) -> (b, t, r): out[e] = sum_i w[e,i] * stack[i].
    """
    weights, stack = as_node(weights), as_node(stack)
    if weights.value.ndim != 2 or stack.value.ndim != 3:
        raise ShapeError(
            f"expert_mix expects (b,n) weights and (n,t,r) stack, got "
            f"{weights.value.shape} and {stack.value.shape}"
        )
    if weights.value.shape[1] != stack.value.shape[0]:
        raise ShapeError(
            f"expert_mix expert counts differ: {weights.value.shape} vs {stack.value.shape}"
        )
    out = np.einsum("bn,ntr->btr", weights.value, stack.value)

    def vjp(g):
        dw = np.einsum("btr,ntr->bn", g, stack.value)
        ds = np.einsum("bn,btr->ntr", weights.value, g)
        return dw, ds

    return Node(out, (weights, stack), vjp)


def _toposort(root):
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate adjoints from a scalar loss; returns {leaf name: gradient}.

    Every reachable node gets its adjoint in ``.grad``; unreachable
    parameters simply do not appear in the result (treat as zero).
    """
    if not isinstance(loss, Node):
        raise GraphError("backward needs a Node produced by a recorded forward pass")
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    grads = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.parents:
            if node.vjp is None:
                raise GraphError("node with parents but no backward rule: graph is detached")
            parts = node.vjp(node.grad)
            if len(parts) != len(node.parents):
                raise GraphError(
                    f"backward rule returned {len(parts)} adjoints for "
                    f"{len(node.parents)} parents"
                )
            for parent, part in zip(node.parents, parts):
                if part.shape != parent.value.shape:
                    raise GraphError(
                        f"adjoint shape {part.shape} does not match value shape "
                        f"{parent.value.shape}"
                    )
                if parent.grad is None:
                    parent.grad = part.copy()
                else:
                    parent.grad += part
        if node.name is not None:
            if node.name in grads:
                raise GraphError(f"two distinct leaves share the name {node.name!r}")
            grads[node.name] = node.grad
    return grads


def finite_diff_check(f, params, eps=1e-6, min_coords=100, seed=0):
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a dict of raw parameter arrays to a scalar loss Node whose
    graph names its leaves by the dict keys. At least ``min_coords``
    coordinates (or all of them, if fewer exist) are sampled across the
    parameter set.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss = f(base)
    if not np.isfinite(loss.value):
        raise NumericalError(f"loss is non-finite: {loss.value}")
    grads = backward(loss)

    flat_index = []
    for name in sorted(base):
        flat_index.extend((name, i) for i in range(base[name].size))
    rng = np.random.default_rng(seed)
    count = min(len(flat_index), max(min_coords, 0))
    picks = rng.choice(len(flat_index), size=count, replace=False)

    worst = 0.0
    for pick in picks:
        name, i = flat_index[pick]
        g_ad = grads.get(name)
        g_ad = 0.0 if g_ad is None else g_ad.reshape(-1)[i]
        bumped = {k: v.copy() for k, v in base.items()}
        bumped[name].reshape(-1)[i] += eps
        up = f(bumped).value
        bumped[name].reshape(-1)[i] -= 2 * eps
        dn = f(bumped).value
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NumericalError("finite-difference probe produced a non-finite loss")
        g_fd = (up - dn) / (2 * eps)
        rel = abs(g_ad - g_fd) / max(1e-12, abs(g_ad) + abs(g_fd))
        worst = max(worst, rel)
    return worst
