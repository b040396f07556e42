"""Reverse-mode automatic differentiation over dense numpy arrays.

A small tape: every operation returns a Tensor holding its inputs and a
vector-Jacobian closure per input. `backward` walks the graph once in
reverse topological order and accumulates gradients into leaf tensors
created with requires_grad=True. 64-bit is the default dtype; training
and all gradient checks run in 64-bit, inference may cast to 32-bit.

`check_gradient` is the independent oracle: central finite differences
re-evaluating the user's closure, never touching the tape internals.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidBackward, NumericError
from .rng import RandomStream

_DEBUG_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness assertions (NumericError on NaN/Inf)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _guard(data: np.ndarray, op: str) -> np.ndarray:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    return data


class Tensor:
    """Dense array plus the tape edges needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_done", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            # float32 survives so inference can run fully in 32-bit;
            # everything else (lists, ints) defaults to float64
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
            self.data = arr if arr.dtype == dtype else arr.astype(dtype)
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._done = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        return div(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op: str) -> Tensor:
    out = Tensor(_guard(data, op))
    live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    # python scalars stay weak so float32 graphs are not upcast
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data + b, [(a, lambda g: g)], "add")
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data * b, [(a, lambda g: g * b)], "mul")
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
        "mul",
    )


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ],
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, [(a, lambda g: -g)], "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericError("matmul expects 2-D operands")
    return _make(
        a.data @ b.data,
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
        "matmul",
    )


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) with the leading axes of x folded for the GEMM."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    parents = [
        (x, lambda g: (g.reshape(-1, w.shape[1]) @ w.data.T).reshape(x.shape)),
        (w, lambda g: x2.T @ g.reshape(-1, w.shape[1])),
    ]
    if b is not None:
        parents.append((b, lambda g: g.reshape(-1, w.shape[1]).sum(axis=0)))
    return _make(out.reshape(*lead, w.shape[1]), parents, "linear")


def pair_linear(h, e, neighbors, w, b=None, order=("self", "edge", "nbr")) -> Tensor:
    """Per-edge projection of receiver state, edge state, sender state.

    Equivalent to concatenating [segments of `order`] per edge and
    multiplying by w, but the node segments run as (n, d) GEMMs that are
    then broadcast/gathered, which avoids materializing the wide
    concatenation. `order` names the row blocks of w: "self" is the
    receiving node, "nbr" the sending node, "edge" the edge vector.
    """
    h, w = as_tensor(h), as_tensor(w)
    e = as_tensor(e)
    n, d = h.shape
    _, k, d_e = e.shape
    sizes = {"self": d, "nbr": d, "edge": d_e}
    offsets = {}
    row = 0
    for seg in order:
        offsets[seg] = (row, row + sizes[seg])
        row += sizes[seg]
    w_self = w.data[offsets["self"][0]:offsets["self"][1]]
    w_nbr = w.data[offsets["nbr"][0]:offsets["nbr"][1]]
    w_edge = w.data[offsets["edge"][0]:offsets["edge"][1]]
    d_out = w.shape[1]

    a_self = h.data @ w_self
    a_nbr = h.data @ w_nbr
    e_flat = e.data.reshape(n * k, d_e)
    out = e_flat @ w_edge
    out = out.reshape(n, k, d_out)
    out = out + a_self[:, None, :] + a_nbr[neighbors]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    # sums of g over slots are shared by vjp_h and vjp_w; cache per pass
    cache = {}

    def reductions(g3):
        key = id(g3)
        if cache.get("key") != key:
            flat_idx = neighbors.reshape(-1)
            onehot = np.zeros((flat_idx.size, n))
            onehot[np.arange(flat_idx.size), flat_idx] = 1.0
            cache["key"] = key
            cache["scatter"] = onehot.T @ g3.reshape(-1, d_out)
            cache["sum"] = g3.sum(axis=1)
        return cache["sum"], cache["scatter"]

    def vjp_h(g):
        gsum, gscat = reductions(g)
        return gsum @ w_self.T + gscat @ w_nbr.T

    def vjp_e(g):
        return (g.reshape(-1, d_out) @ w_edge.T).reshape(n, k, d_e)

    def vjp_w(g):
        gsum, gscat = reductions(g)
        gw = np.empty_like(w.data)
        gw[offsets["self"][0]:offsets["self"][1]] = h.data.T @ gsum
        gw[offsets["nbr"][0]:offsets["nbr"][1]] = h.data.T @ gscat
        gw[offsets["edge"][0]:offsets["edge"][1]] = e_flat.T @ g.reshape(-1, d_out)
        return gw

    parents = [(h, vjp_h), (e, vjp_e), (w, vjp_w)]
    if b is not None:
        parents.append((b, lambda g: g.reshape(-1, d_out).sum(axis=0)))
    return _make(out, parents, "pair_linear")


def edge_scores(q, kk, heads: int) -> Tensor:
    """Per-head dot products of node queries with per-edge keys.

    q: (n, d), kk: (n, k, d) with d = heads * d_k -> (n, k, heads).
    """
    q, kk = as_tensor(q), as_tensor(kk)
    n, k, d = kk.shape
    d_k = d // heads
    q4 = q.data.reshape(n, heads, d_k)
    k4 = kk.data.reshape(n, k, heads, d_k)
    out = np.einsum("nhd,nkhd->nkh", q4, k4)
    return _make(out, [
        (q, lambda g: np.einsum("nkh,nkhd->nhd", g, k4).reshape(n, d)),
        (kk, lambda g: np.einsum("nkh,nhd->nkhd", g, q4).reshape(n, k, d)),
    ], "edge_scores")


def attn_combine(alpha, v, heads: int) -> Tensor:
    """Attention-weighted sum of per-edge values.

    alpha: (n, k, heads), v: (n, k, d) -> (n, d).
    """
    alpha, v = as_tensor(alpha), as_tensor(v)
    n, k, d = v.shape
    d_v = d // heads
    v4 = v.data.reshape(n, k, heads, d_v)
    out = np.einsum("nkh,nkhv->nhv", alpha.data, v4).reshape(n, d)
    return _make(out, [
        (alpha, lambda g: np.einsum("nkhv,nhv->nkh", v4, g.reshape(n, heads, d_v))),
        (v, lambda g: np.einsum("nkh,nhv->nkhv", alpha.data,
                                g.reshape(n, heads, d_v)).reshape(n, k, d)),
    ], "attn_combine")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(old))], "reshape")


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(index):
        return lambda g: np.split(g, splits, axis=axis)[index]

    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        [(p, make_vjp(i)) for i, p in enumerate(parts)],
        "concat",
    )


def take_rows(a, index) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index)

    def vjp(g):
        if a.data.ndim == 2:
            # one-hot scatter as a GEMM; much faster than np.add.at
            flat_idx = index.reshape(-1)
            g_flat = g.reshape(-1, a.data.shape[1])
            onehot = np.zeros((flat_idx.size, a.data.shape[0]))
            onehot[np.arange(flat_idx.size), flat_idx] = 1.0
            return onehot.T @ g_flat
        out = np.zeros_like(a.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, *a.data.shape[1:]))
        return out

    return _make(a.data[index], [(a, vjp)], "take_rows")


def expand_rows(a, k: int) -> Tensor:
    """(n, d) -> (n, k, d) by repetition; backward sums the new axis."""
    a = as_tensor(a)
    n, d = a.shape
    data = np.broadcast_to(a.data[:, None, :], (n, k, d)).copy()
    return _make(data, [(a, lambda g: g.sum(axis=1))], "expand_rows")


def tile_row(a, n: int) -> Tensor:
    """(1, d) -> (n, d) by repetition; backward sums rows."""
    a = as_tensor(a)
    data = np.broadcast_to(a.data, (n, a.shape[1])).copy()
    return _make(data, [(a, lambda g: g.sum(axis=0, keepdims=True))], "tile_row")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)], "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)], "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), [(a, lambda g: g / a.data)], "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))], "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, [(a, lambda g: g * (a.data > 0))], "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * x2))
    half_x = 0.5 * x
    out = half_x + half_x * t

    def vjp(g):
        dinner = _GELU_C + (3.0 * _GELU_C * 0.044715) * x2
        return g * (0.5 + 0.5 * t + half_x * ((1.0 - t * t) * dinner))

    return _make(out, [(a, vjp)], "gelu")


def softmax(a, axis=-1) -> Tensor:
    """Max-shifted softmax; non-finite input raises NumericError."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input is not finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, [(a, vjp)], "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def vjp_x(g):
        dxhat = g * gain.data
        term1 = dxhat
        term2 = dxhat.mean(axis=-1, keepdims=True)
        term3 = xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (term1 - term2 - term3)

    def vjp_gain(g):
        return _unbroadcast(g * xhat, gain.shape)

    def vjp_bias(g):
        return _unbroadcast(g, bias.shape)

    del d
    return _make(out, [(x, vjp_x), (gain, vjp_gain), (bias, vjp_bias)], "layer_norm")


def dropout(x, rate: float, stream: RandomStream | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or rate == 0."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate must be in [0, 1), got {rate}")
    keep = stream.keep_mask(x.shape, rate) * (1.0 / (1.0 - rate))
    return _make(x.data * keep, [(x, lambda g: g * keep)], "dropout")


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate .grad for every requires_grad leaf reachable from root.

    The root must be scalar; running backward twice on the same graph
    raises InvalidBackward.
    """
    if root.size != 1:
        raise InvalidBackward(f"backward root must be scalar, got shape {root.shape}")
    if root._done:
        raise InvalidBackward("backward already ran on this graph")
    root._done = True
    if not root.requires_grad:
        return

    # grads hold [array, owned]; un-owned arrays may alias a child's
    # gradient (e.g. reshape views), so the first accumulation copies.
    grads = {id(root): [np.ones_like(root.data), True]}
    for node in reversed(_topo_order(root)):
        entry = grads.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            key = id(parent)
            slot = grads.get(key)
            if slot is None:
                grads[key] = [pg, False]
            elif slot[1]:
                slot[0] += pg
            else:
                slot[0] = slot[0] + pg
                slot[1] = True


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


def check_gradient(f, params, eps: float = 1e-5, samples_per_param=None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor (dropout off). With `samples_per_param` set, a seeded subset
    of entries is probed per parameter; None probes every entry.
    Relative error: |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    named = params if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    zero_grads(named)
    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named.items()}

    worst = 0.0
    stream = RandomStream(seed, "gradcheck")
    for name, p in named.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if samples_per_param is None or size <= samples_per_param:
            indices = range(size)
        else:
            indices = stream.child(name).permutation(size)[:samples_per_param]
        aflat = analytic[name].reshape(-1)
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = f().item()
            flat[idx] = orig - eps
            lo = f().item()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = aflat[idx]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    zero_grads(named)
    return worst
