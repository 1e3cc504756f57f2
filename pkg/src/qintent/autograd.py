"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects backed by numpy arrays.
A graph is only recorded when at least one input requires a gradient, so
inference over plain parameter tensors costs nothing beyond the numpy work.
Ops accept leading batch dimensions wherever that is natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "custom_op",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "index",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding",
    "embedding_bag",
    "softmax_xent",
    "conv1d_maxpool",
    "lstm_step",
    "lstm_sequence",
    "attention_block",
]

PAD_ID = 0
_NEG_INF = -np.inf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A numpy array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``grad_fn(g)`` receives the gradient w.r.t. the output and returns one
    gradient (or None) per parent, in order.
    """
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values produced from finite inputs")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered view of the nodes reachable from ``root``."""

    nodes: list[Tensor] = field(default_factory=list)
    root: Tensor | None = None

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes=order, root=root)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(root: Tensor | Graph) -> None:
    """Populate ``.grad`` of every gradient-requiring leaf under a scalar root.

    Leaf gradients are replaced, not accumulated across calls. Contributions
    from a tensor used several times within the graph are summed.
    """
    graph = root if isinstance(root, Graph) else Graph.trace(root)
    top = graph.root
    if top is None or top.data.size != 1:
        shape = None if top is None else top.shape
        raise ShapeError(f"backward requires a scalar root, got shape {shape}")
    grads: dict[int, np.ndarray] = {id(top): np.ones_like(top.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(
    build: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    step: float = 1e-5,
    max_elements: int = 100,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central differences.

    ``build`` must construct a fresh graph from ``inputs`` on every call and
    return its scalar root. Tensors with more than ``max_elements`` entries
    are checked on a random subsample of ``max_elements`` positions. Returns
    the max of ``|a - n| / max(1, |a|, |n|)`` over all checked entries.
    """
    params = [t for t in inputs if t.requires_grad]
    if not params:
        raise ValueError("grad_check needs at least one input with requires_grad=True")
    root = build()
    backward(root)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(params, analytic):
        flat = t.data.reshape(-1)
        if flat.size > max_elements:
            positions = rng.choice(flat.size, size=max_elements, replace=False)
        else:
            positions = np.arange(flat.size)
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + step
            up = build().item()
            flat[pos] = orig - step
            down = build().item()
            flat[pos] = orig
            num = (up - down) / (2 * step)
            ana = a.reshape(-1)[pos]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs arrays, got shapes {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        A, B = a.data, b.data
        if A.ndim == 1 and B.ndim == 1:
            return (g * B if a.requires_grad else None, g * A if b.requires_grad else None)
        if a.requires_grad:
            if B.ndim == 1:
                ga = np.multiply.outer(g, B)
            else:
                ga = np.matmul(g if A.ndim > 1 else g[..., None, :], np.swapaxes(B, -1, -2))
                if A.ndim == 1:
                    ga = ga[..., 0, :]
            ga = _unbroadcast(ga, A.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim >= 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif A.ndim == 1:
                gb = np.multiply.outer(A, g) if B.ndim == 2 else _unbroadcast(A[:, None] * g[..., None, :], B.shape)
            elif B.ndim == 1:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g[..., None], B.shape + (1,)).reshape(B.shape)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
        return ga, gb

    return custom_op(out, (a, b), grad_fn, "matmul")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(np.asarray(out), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return custom_op(out, parts, grad_fn, "concat")


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int)) for p in parts)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return custom_op(np.array(out), (a,), grad_fn, "index")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return custom_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return custom_op(y, (a,), grad_fn, "gelu")


def _softmax_np(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, _NEG_INF)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) drops entries."""
    p = _softmax_np(a.data, mask)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (a,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def grad_fn(g):
        gg = gamma_g = beta_g = None
        if gamma.requires_grad:
            gamma_g = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            beta_g = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gg = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gg, gamma_g, beta_g

    return custom_op(out, (x, gamma, beta), grad_fn, "layer_norm")


def embedding(ids: np.ndarray, table: Tensor, pad_id: int | None = PAD_ID) -> Tensor:
    """Row lookup. Rows equal to ``pad_id`` produce zeros and receive no gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range for embedding table with {V} rows")
    out = table.data[ids]
    if pad_id is not None:
        pad = ids == pad_id
        if pad.any():
            out[pad] = 0.0

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if pad_id is not None:
            gt[pad_id] = 0.0
        return (gt,)

    return custom_op(out, (table,), grad_fn, "embedding")


def embedding_bag(ids: np.ndarray, weights: np.ndarray, table: Tensor) -> Tensor:
    """Weighted sum of table rows: ``out[b] = sum_m weights[b, m] * table[ids[b, m]]``.

    This is a sparse-feature matrix product; zero weights act as padding.
    """
    ids = np.asarray(ids, dtype=np.int64)
    w = np.asarray(weights, dtype=table.data.dtype)
    if ids.shape != w.shape:
        raise ShapeError(f"embedding_bag ids {ids.shape} and weights {w.shape} differ")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"feature index out of range for table with {V} rows")
    out = np.einsum("bm,bmc->bc", w, table.data[ids])

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        contrib = w[:, :, None] * g[:, None, :]
        np.add.at(gt, ids.reshape(-1), contrib.reshape(-1, table.shape[1]))
        return (gt,)

    return custom_op(out, (table,), grad_fn, "embedding_bag")


def softmax_xent(logits: Tensor, labels) -> tuple[np.ndarray, Tensor]:
    """Stable softmax and mean cross-entropy.

    ``logits`` is ``[n]`` with a scalar label or ``[B, n]`` with ``B`` labels.
    Returns ``(probs, loss)`` where ``loss`` is averaged over the batch.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = z2.shape[-1]
    if n < 2:
        raise ShapeError("softmax_xent needs at least two classes")
    if y.shape[0] != z2.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {z2.shape[0]} rows of logits")
    if y.size and (y.min() < 0 or y.max() >= n):
        raise IndexError(f"label out of range for {n} classes")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(z2.shape[0])
    nll = np.log(s[:, 0]) - shifted[rows, y]
    loss = np.asarray(nll.mean())
    B = z2.shape[0]

    def grad_fn(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        d *= g / B
        return (d[0] if single else d,)

    out = custom_op(loss, (logits,), grad_fn, "softmax_xent")
    return (probs[0] if single else probs), out


# ---------------------------------------------------------------------------
# sequence encoders
# ---------------------------------------------------------------------------


def conv1d_maxpool(
    seq: Tensor,
    filters: Tensor,
    bias: Tensor,
    lengths: np.ndarray | None = None,
) -> Tensor:
    """Valid 1-D cross-correlation over time followed by max-pooling.

    ``seq`` is ``[L, d]`` or ``[B, L, d]``; ``filters`` is ``[f, h, d]``.
    Inputs shorter than ``h`` are right-padded with zeros. With ``lengths``
    only windows lying inside ``max(length, h)`` take part in the max, so a
    row with fewer than ``h`` real tokens uses its single zero-padded window.
    """
    x = seq.data
    single = x.ndim == 2
    if single:
        x = x[None]
    f, h, d = filters.shape
    if x.shape[-1] != d:
        raise ShapeError(f"conv1d_maxpool: sequence dim {x.shape[-1]} != filter dim {d} (filters {filters.shape})")
    B, L, _ = x.shape
    if L < 1:
        raise ShapeError("conv1d_maxpool needs a sequence of length >= 1")
    Lp = max(L, h)
    if Lp > L:
        x = np.concatenate([x, np.zeros((B, Lp - L, d), dtype=x.dtype)], axis=1)
    W = Lp - h + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, h, axis=1)  # [B, W, d, h]
    cols = cols.transpose(0, 1, 3, 2).reshape(B, W, h * d)
    fmat = filters.data.reshape(f, h * d)
    conv = cols @ fmat.T + bias.data
    if lengths is not None:
        n_valid = np.maximum(np.asarray(lengths, dtype=np.int64) - h + 1, 1)
        valid = np.arange(W)[None, :] < n_valid[:, None]
        conv = np.where(valid[:, :, None], conv, _NEG_INF)
    arg = conv.argmax(axis=1)  # [B, f]
    out = np.take_along_axis(conv, arg[:, None, :], axis=1)[:, 0, :]

    def grad_fn(g):
        g2 = g[None] if single else g
        dconv = np.zeros((B, W, f), dtype=g2.dtype)
        np.put_along_axis(dconv, arg[:, None, :], g2[:, None, :], axis=1)
        gx = gf = gb = None
        if seq.requires_grad:
            dcols = (dconv @ fmat).reshape(B, W, h, d)
            gx_full = np.zeros((B, Lp, d), dtype=g2.dtype)
            for j in range(h):
                gx_full[:, j : j + W] += dcols[:, :, j]
            gx = gx_full[:, :L]
            if single:
                gx = gx[0]
        if filters.requires_grad:
            gf = (dconv.reshape(-1, f).T @ cols.reshape(-1, h * d)).reshape(f, h, d)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gf, gb

    return custom_op(out[0] if single else out, (seq, filters, bias), grad_fn, "conv1d_maxpool")


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update built from primitive ops.

    Gate layout along the last axis of ``w_x``/``w_h``/``b`` is
    ``[input, forget, candidate, output]``, each of width ``k``.
    """
    k = h.shape[-1]
    if x.shape[-1] != w_x.shape[0]:
        raise ShapeError(f"lstm_step: input dim {x.shape[-1]} does not match w_x {w_x.shape}")
    if w_h.shape != (k, 4 * k) or b.shape != (4 * k,) or c.shape != h.shape:
        raise ShapeError(f"lstm_step: inconsistent state/weights h={h.shape} c={c.shape} w_h={w_h.shape} b={b.shape}")
    z = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    i = sigmoid(index(z, (..., slice(0, k))))
    f = sigmoid(index(z, (..., slice(k, 2 * k))))
    g = tanh(index(z, (..., slice(2 * k, 3 * k))))
    o = sigmoid(index(z, (..., slice(3 * k, 4 * k))))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_sequence(
    x: Tensor,
    lengths: np.ndarray,
    w_x: Tensor,
    w_h: Tensor,
    b: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Run an LSTM over ``x[B, L, d]`` and return the final hidden state ``[B, k]``.

    Each row only consumes its first ``lengths[b]`` positions. Forward
    direction reads them left to right; ``reverse`` reads them right to left
    starting at the last real token. Initial states are zero, so a row of
    length 0 returns zeros. Fused equivalent of unrolling :func:`lstm_step`.
    """
    X = x.data
    B, L, d = X.shape
    k = w_h.shape[0]
    if w_x.shape != (d, 4 * k):
        raise ShapeError(f"lstm_sequence: w_x {w_x.shape} does not fit input dim {d} and hidden {k}")
    lengths = np.asarray(lengths, dtype=np.int64)
    Wx, Wh, bias = w_x.data, w_h.data, b.data
    XW = (X.reshape(B * L, d) @ Wx).reshape(B, L, 4 * k)
    steps = range(L - 1, -1, -1) if reverse else range(L)
    h = np.zeros((B, k), dtype=X.dtype)
    c = np.zeros((B, k), dtype=X.dtype)
    tape = []
    for t in steps:
        m = (t < lengths)[:, None]
        z = XW[:, t] + h @ Wh + bias
        i = _sigmoid(z[:, :k])
        f = _sigmoid(z[:, k : 2 * k])
        g = np.tanh(z[:, 2 * k : 3 * k])
        o = _sigmoid(z[:, 3 * k :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        full = bool(m.all())
        tape.append((t, m, full, h, c, i, f, g, o, tc))
        if full:
            h, c = h_new, c_new
        else:
            h = np.where(m, h_new, h)
            c = np.where(m, c_new, c)

    def grad_fn(gout):
        dh = gout.copy()
        dc = np.zeros_like(dh)
        dWh = np.zeros_like(Wh)
        db = np.zeros_like(bias)
        dXW = np.zeros_like(XW)
        for t, m, full, h_prev, c_prev, i, f, g, o, tc in reversed(tape):
            if full:
                dhn, dcn_in = dh, dc
            else:
                dhn, dcn_in = dh * m, dc * m
            do = dhn * tc
            dcn = dcn_in + dhn * o * (1.0 - tc * tc)
            di = dcn * g
            dg = dcn * i
            df = dcn * c_prev
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
            )
            dWh += h_prev.T @ dz
            db += dz.sum(axis=0)
            dXW[:, t] = dz
            dh_prev = dz @ Wh.T
            dc_prev = dcn * f
            if not full:
                keep = ~m
                dh_prev = dh_prev + dh * keep
                dc_prev = dc_prev + dc * keep
            dh, dc = dh_prev, dc_prev
        dXW2 = dXW.reshape(B * L, 4 * k)
        gx = (dXW2 @ Wx.T).reshape(B, L, d) if x.requires_grad else None
        gwx = X.reshape(B * L, d).T @ dXW2 if w_x.requires_grad else None
        return gx, gwx, dWh, db

    return custom_op(h, (x, w_x, w_h, b), grad_fn, "lstm_sequence")


def attention_block(
    seq: Tensor,
    params: dict[str, Tensor],
    heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Post-norm transformer encoder block.

    ``seq`` is ``[L, d]`` or ``[B, L, d]``; ``mask`` marks real (attendable)
    positions with shape ``[L]`` or ``[B, L]``. Expected params:
    ``wq bq wk bk wv bv wo bo ln1_g ln1_b w1 b1 w2 b2 ln2_g ln2_b``.
    """
    single = seq.ndim == 2
    x = reshape(seq, (1,) + seq.shape) if single else seq
    B, L, d = x.shape
    if d % heads:
        raise ShapeError(f"model dim {d} is not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if single:
            mask = mask[None]
        if mask.shape != (B, L):
            raise ShapeError(f"attention mask shape {mask.shape} does not match sequence ({B}, {L})")
    dh = d // heads
    p = params

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, p["wq"]), p["bq"]))
    k = split_heads(add(matmul(x, p["wk"]), p["bk"]))
    v = split_heads(add(matmul(x, p["wv"]), p["bv"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = softmax(scores, None if mask is None else mask[:, None, None, :])
    ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    attn_out = add(matmul(ctx, p["wo"]), p["bo"])
    h1 = layer_norm(add(x, attn_out), p["ln1_g"], p["ln1_b"])
    ff = add(matmul(gelu(add(matmul(h1, p["w1"]), p["b1"])), p["w2"]), p["b2"])
    h2 = layer_norm(add(h1, ff), p["ln2_g"], p["ln2_b"])
    return reshape(h2, (L, d)) if single else h2


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
