"""
Minimal reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every forward op builds a node on a dynamic graph; ``Tensor.backward`` walks
that graph in reverse topological order and accumulates gradients into every
tensor created with ``requires_grad=True``. Only the ops needed by the FDRL
network are provided; there is no general broadcasting.

A small registry of finite-difference checks lives at the bottom of the
module so the CLI can run them by name.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, LabelRangeError

DTYPE = np.float64


class Tensor:
    """A 2-D array of float64 values with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), op="", _copy=True):
        arr = np.array(data, dtype=DTYPE) if _copy else np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def backward(self):
        """Backpropagate from this scalar tensor."""
        if self.shape != (1, 1):
            raise DimensionError(f"backward() needs a scalar (1x1) tensor, got {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones((1, 1), dtype=DTYPE)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()


def _topological_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op,
                  _copy=False)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            _accum(a, out.grad @ b.data.T)
            _accum(b, a.data.T @ out.grad)
        out._backward = _backward
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            _accum(a, out.grad)
            _accum(b, out.grad)
        out._backward = _backward
    return out


def elementwise_sum(a, b):
    """S = S_a + S_t; same-shape addition."""
    return add(a, b)


def add_bias(x, b):
    """Add a 1 x n row vector to every row of an m x n tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.rows != 1 or b.cols != x.cols:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    out = _node(x.data + b.data, (x, b), "add_bias")
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad)
            _accum(b, out.grad.sum(axis=0, keepdims=True))
        out._backward = _backward
    return out


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    out = _node(x.data * c, (x,), "scale")
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad * c)
        out._backward = _backward
    return out


def mul_rows(x, weights):
    """Multiply row i of ``x`` by the constant ``weights[i]``.

    ``weights`` is a plain array and receives no gradient.
    """
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=DTYPE).reshape(-1, 1)
    if w.shape[0] != x.rows:
        raise DimensionError(f"mul_rows: {w.shape[0]} weights for {x.rows} rows")
    out = _node(x.data * w, (x,), "mul_rows")
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad * w)
        out._backward = _backward
    return out


def transpose(x):
    x = _as_tensor(x)
    out = _node(x.data.T.copy(), (x,), "transpose")
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad.T)
        out._backward = _backward
    return out


def mean_rows(x):
    """Column-wise mean: m x n -> 1 x n."""
    x = _as_tensor(x)
    m = x.rows
    out = _node(x.data.mean(axis=0, keepdims=True), (x,), "mean_rows")
    if out.requires_grad:
        def _backward():
            _accum(x, np.repeat(out.grad / m, m, axis=0))
        out._backward = _backward
    return out


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_rows: nothing to concatenate")
    width = tensors[0].cols
    for t in tensors[1:]:
        if t.cols != width:
            raise DimensionError(f"concat_rows: widths differ {tensors[0].shape} vs {t.shape}")
    sizes = [t.rows for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=0), tensors, "concat_rows")
    if out.requires_grad:
        def _backward():
            start = 0
            for t, n in zip(tensors, sizes):
                _accum(t, out.grad[start:start + n])
                start += n
        out._backward = _backward
    return out


# Stacking row blocks is the same operation as concatenation along rows.
row_stack = concat_rows


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_cols: nothing to concatenate")
    height = tensors[0].rows
    for t in tensors[1:]:
        if t.rows != height:
            raise DimensionError(f"concat_cols: heights differ {tensors[0].shape} vs {t.shape}")
    sizes = [t.cols for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=1), tensors, "concat_cols")
    if out.requires_grad:
        def _backward():
            start = 0
            for t, n in zip(tensors, sizes):
                _accum(t, out.grad[:, start:start + n])
                start += n
        out._backward = _backward
    return out


def slice_rows(x, start, stop):
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.rows:
        raise DimensionError(f"slice_rows: [{start}, {stop}) out of range for {x.shape}")
    out = _node(x.data[start:stop].copy(), (x,), "slice_rows")
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            _accum(x, g)
        out._backward = _backward
    return out


def split_rows(x, sizes):
    x = _as_tensor(x)
    if sum(sizes) != x.rows:
        raise DimensionError(f"split_rows: sizes {list(sizes)} do not cover {x.rows} rows")
    parts, start = [], 0
    for n in sizes:
        parts.append(slice_rows(x, start, start + n))
        start += n
    return parts


def reshape(x, rows, cols):
    """Row-major reshape."""
    x = _as_tensor(x)
    if rows * cols != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    shape = x.shape
    out = _node(x.data.reshape(rows, cols).copy(), (x,), "reshape")
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad.reshape(shape))
        out._backward = _backward
    return out


def block_matmul_nt(q, k, block):
    """Per-block ``Q_b K_b^T`` for row blocks of height ``block``.

    ``q`` and ``k`` are (n*block) x h; the result is (n*block) x block where
    row ``b*block + i`` holds the dot products of query i of block b with
    every key of block b.
    """
    q, k = _as_tensor(q), _as_tensor(k)
    _same_shape(q, k, "block_matmul_nt")
    if q.rows % block:
        raise DimensionError(f"block_matmul_nt: {q.rows} rows not divisible by block {block}")
    n, h = q.rows // block, q.cols
    q3 = q.data.reshape(n, block, h)
    k3 = k.data.reshape(n, block, h)
    out = _node((q3 @ k3.transpose(0, 2, 1)).reshape(n * block, block), (q, k), "block_matmul_nt")
    if out.requires_grad:
        def _backward():
            g3 = out.grad.reshape(n, block, block)
            _accum(q, (g3 @ k3).reshape(n * block, h))
            _accum(k, (g3.transpose(0, 2, 1) @ q3).reshape(n * block, h))
        out._backward = _backward
    return out


def block_matmul(w, v, block):
    """Per-block ``W_b V_b``: (n*block) x block times (n*block) x h."""
    w, v = _as_tensor(w), _as_tensor(v)
    if w.cols != block or w.rows != v.rows or w.rows % block:
        raise DimensionError(f"block_matmul: incompatible {w.shape} and {v.shape} for block {block}")
    n, h = w.rows // block, v.cols
    w3 = w.data.reshape(n, block, block)
    v3 = v.data.reshape(n, block, h)
    out = _node((w3 @ v3).reshape(n * block, h), (w, v), "block_matmul")
    if out.requires_grad:
        def _backward():
            g3 = out.grad.reshape(n, block, h)
            _accum(w, (g3 @ v3.transpose(0, 2, 1)).reshape(n * block, block))
            _accum(v, (w3.transpose(0, 2, 1) @ g3).reshape(n * block, h))
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------

def _relu_grad_mask(x):
    # subgradient at exactly 0 is 0
    return (x > 0).astype(DTYPE)


def relu(x):
    x = _as_tensor(x)
    out = _node(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def _backward():
            _accum(x, out.grad * _relu_grad_mask(x.data))
        out._backward = _backward
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x):
    x = _as_tensor(x)
    s = _softmax(x.data)
    out = _node(s, (x,), "softmax_rows")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(x, s * (g - (g * s).sum(axis=1, keepdims=True)))
        out._backward = _backward
    return out


def softmax_np(x):
    """Row softmax of a plain array, outside the graph."""
    return _softmax(np.asarray(x, dtype=DTYPE))


def _check_labels(labels, n_rows, n_classes):
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n_rows:
        raise DimensionError(f"cross_entropy: {y.shape} labels for {n_rows} rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelRangeError("cross_entropy: labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelRangeError(f"cross_entropy: labels must lie in [0, {n_classes}), got "
                              f"min {y.min()} max {y.max()}")
    return y


def cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    B, C = logits.shape
    y = _check_labels(labels, B, C)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsumexp - z[rows, y]))
    out = _node([[loss]], (logits,), "cross_entropy")
    if out.requires_grad:
        def _backward():
            g = _softmax(logits.data)
            g[rows, y] -= 1.0
            _accum(logits, g * (out.grad[0, 0] / B))
        out._backward = _backward
    return out


def frobenius_sq(x):
    x = _as_tensor(x)
    out = _node([[float(np.sum(x.data * x.data))]], (x,), "frobenius_sq")
    if out.requires_grad:
        def _backward():
            _accum(x, 2.0 * x.data * out.grad[0, 0])
        out._backward = _backward
    return out


def sum_scalars(terms):
    """Add a sequence of 1x1 tensors."""
    terms = list(terms)
    if not terms:
        return Tensor([[0.0]])
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def grad_reverse(x, lam):
    """Gradient reversal: identity forward, gradient times -lam backward."""
    x = _as_tensor(x)
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda must be >= 0, got {lam}")
    out = _node(x.data, (x,), "grad_reverse")
    if out.requires_grad:
        def _backward():
            _accum(x, -lam * out.grad)
        out._backward = _backward
    return out


def dann_lambda(progress, gamma=10.0):
    """GRL coefficient ramp 2 / (1 + exp(-gamma p)) - 1 for progress p in [0, 1]."""
    p = min(max(float(progress), 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric, floor=1e-6):
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], t: Tensor, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. the values of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step=1e-5):
    """Compare reverse-mode and finite-difference gradients.

    ``loss_fn`` must rebuild the graph from ``params`` on every call and
    return a scalar tensor. Returns the max relative error over all params.
    """
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(lambda: loss_fn().item(), p, step)
        worst = max(worst, relative_error(a, n))
    return worst


GRADCHECKS: dict[str, Callable[[np.random.Generator], float]] = {}


def register_check(name):
    def deco(fn):
        GRADCHECKS[name] = fn
        return fn
    return deco


def run_gradchecks(names: Iterable[str] | None = None, seed=0):
    """Run registered checks; returns {name: max relative error}."""
    names = list(GRADCHECKS) if names is None else list(names)
    results = {}
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        results[name] = GRADCHECKS[name](rng)
    return results


def _rand(rng, r, c):
    return Tensor(rng.uniform(-1.0, 1.0, size=(r, c)), requires_grad=True)


def _weighted_sum(x, w):
    # fixed random projection to a scalar so every output entry matters
    return frobenius_sq(add(x, Tensor(w)))


def _away_from_zero(rng, r, c, margin=1e-3):
    v = rng.uniform(-1.0, 1.0, size=(r, c))
    v[np.abs(v) < margin] = margin * 2
    return Tensor(v, requires_grad=True)


@register_check("matmul")
def _check_matmul(rng):
    a, b = _rand(rng, 4, 3), _rand(rng, 3, 5)
    w = rng.normal(size=(4, 5))
    return gradcheck(lambda: _weighted_sum(matmul(a, b), w), [a, b])


@register_check("relu")
def _check_relu(rng):
    x = _away_from_zero(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    return gradcheck(lambda: _weighted_sum(relu(x), w), [x])


@register_check("softmax_rows")
def _check_softmax(rng):
    x = _rand(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return gradcheck(lambda: _weighted_sum(softmax_rows(x), w), [x])


@register_check("cross_entropy")
def _check_ce(rng):
    x = _rand(rng, 5, 3)
    y = rng.integers(0, 3, size=5)
    return gradcheck(lambda: cross_entropy(x, y), [x])


@register_check("frobenius_sq")
def _check_frob(rng):
    x = _rand(rng, 3, 3)
    return gradcheck(lambda: frobenius_sq(x), [x])


@register_check("grad_reverse")
def _check_grl(rng):
    # reversal is not a true derivative: compare against -lam * d/dx of the plain path
    x = _rand(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    lam = 0.7
    x.zero_grad()
    _weighted_sum(grad_reverse(x, lam), w).backward()
    analytic = x.grad.copy()
    numeric = numeric_grad(lambda: _weighted_sum(x, w).item(), x)
    x.zero_grad()
    return relative_error(analytic, -lam * numeric)


@register_check("add_bias")
def _check_add_bias(rng):
    x, b = _rand(rng, 4, 3), _rand(rng, 1, 3)
    w = rng.normal(size=(4, 3))
    return gradcheck(lambda: _weighted_sum(add_bias(x, b), w), [x, b])


@register_check("elementwise_sum")
def _check_add(rng):
    a, b = _rand(rng, 4, 3), _rand(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    return gradcheck(lambda: _weighted_sum(elementwise_sum(a, b), w), [a, b])


@register_check("scale")
def _check_scale(rng):
    x = _rand(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    return gradcheck(lambda: _weighted_sum(scale(x, -1.7), w), [x])


@register_check("mul_rows")
def _check_mul_rows(rng):
    x = _rand(rng, 4, 3)
    r = rng.uniform(0.0, 1.0, size=4)
    w = rng.normal(size=(4, 3))
    return gradcheck(lambda: _weighted_sum(mul_rows(x, r), w), [x])


@register_check("mean_rows")
def _check_mean_rows(rng):
    x = _rand(rng, 4, 3)
    w = rng.normal(size=(1, 3))
    return gradcheck(lambda: _weighted_sum(mean_rows(x), w), [x])


@register_check("transpose")
def _check_transpose(rng):
    x = _rand(rng, 4, 3)
    w = rng.normal(size=(3, 4))
    return gradcheck(lambda: _weighted_sum(transpose(x), w), [x])


@register_check("concat_rows")
def _check_concat_rows(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 3, 3)
    w = rng.normal(size=(5, 3))
    return gradcheck(lambda: _weighted_sum(concat_rows([a, b]), w), [a, b])


@register_check("concat_cols")
def _check_concat_cols(rng):
    a, b = _rand(rng, 3, 2), _rand(rng, 3, 4)
    w = rng.normal(size=(3, 6))
    return gradcheck(lambda: _weighted_sum(concat_cols([a, b]), w), [a, b])


@register_check("split_rows")
def _check_split_rows(rng):
    x = _rand(rng, 5, 3)
    w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))

    def loss():
        p, q = split_rows(x, [2, 3])
        return add(_weighted_sum(p, w1), _weighted_sum(q, w2))
    return gradcheck(loss, [x])


@register_check("reshape")
def _check_reshape(rng):
    x = _rand(rng, 4, 6)
    w = rng.normal(size=(8, 3))
    return gradcheck(lambda: _weighted_sum(reshape(x, 8, 3), w), [x])


@register_check("block_matmul_nt")
def _check_block_nt(rng):
    q, k = _rand(rng, 8, 3), _rand(rng, 8, 3)
    w = rng.normal(size=(8, 4))
    return gradcheck(lambda: _weighted_sum(block_matmul_nt(q, k, 4), w), [q, k])


@register_check("block_matmul")
def _check_block(rng):
    a, v = _rand(rng, 8, 4), _rand(rng, 8, 3)
    w = rng.normal(size=(8, 3))
    return gradcheck(lambda: _weighted_sum(block_matmul(a, v, 4), w), [a, v])
