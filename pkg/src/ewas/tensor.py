"""Deterministic n-d tensors with reverse-mode automatic differentiation.

The engine is a define-by-run tape over numpy arrays. Every operation
returns a new ``Tensor`` whose backward closure knows how to route an
incoming gradient to its parents. ``backward()`` walks the recorded graph
once, in reverse topological order, and accumulates gradients additively
into leaves that have ``requires_grad`` set.

Conventions that tests rely on:

* default dtype is float64; float32 is selectable per tensor/model,
* ``relu`` has subgradient 0 at exactly 0,
* flattening a (B, C, H, W) tensor is channel-major, then row, then
  column (numpy C order) -- the single contract shared with the scaling
  module's mask reformat,
* a graph may be backpropagated exactly once.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBatchError,
    GraphConsumedError,
    NormalizationError,
    ShapeError,
)

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Numeric array plus optional gradient accumulator and tape links."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Operator sugar; scalars are python floats, tensors must match shape.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def reshape(self, shape):
        return reshape(self, shape)


def _result(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    """Wrap an op result, recording the tape edge only when it matters."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


class Graph:
    """Topologically ordered record of one forward pass."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return Graph(order)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf with ``requires_grad``.

    The graph below ``loss`` is consumed; a second call raises
    ``GraphConsumedError``. Gradient accumulation into leaves is additive
    across separate graphs.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    for node in graph.nodes:
        if node._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
    grad_map = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grad_map.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        node._consumed = True
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grad_map:
                grad_map[key] = grad_map[key] + pg
            else:
                grad_map[key] = pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; both operands receive gradients."""
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def maximum_scalar(x: Tensor, c: float) -> Tensor:
    """Elementwise max(x, c); gradient flows only where x > c."""
    mask = x.data > c
    return _result(np.where(mask, x.data, c), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.data.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    shape = x.data.shape
    n = x.data.size
    return _result(
        np.asarray(x.data.mean(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs rank-2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for {a.data.shape} x {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-K vector to every row of a (B, K) tensor."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: got {x.data.shape} and {v.data.shape}")
    return _result(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)))


def gather_labels(x: Tensor, labels: np.ndarray) -> Tensor:
    """Pick x[b, labels[b]] for each row; returns a (B,) tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, k = x.data.shape
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    rows = np.arange(batch)

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, labels), g)
        return (dx,)

    return _result(x.data[rows, labels].copy(), (x,), grad_fn)


def masked_rowmax(x: Tensor, exclude_labels: np.ndarray) -> Tensor:
    """Rowwise max over columns k != label; ties resolved to the lowest index.

    The winning index is a constant of differentiation: the gradient is
    routed to the selected entry only.
    """
    labels = np.asarray(exclude_labels, dtype=np.int64)
    batch, k = x.data.shape
    if k < 2:
        raise ShapeError("masked_rowmax needs at least 2 columns")
    rows = np.arange(batch)
    masked = x.data.copy()
    masked[rows, labels] = -np.inf
    winners = masked.argmax(axis=1)

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, winners), g)
        return (dx,)

    return _result(masked[rows, winners].copy(), (x,), grad_fn)


def take_columns(w: Tensor, idx: np.ndarray) -> Tensor:
    """Stack columns w[:, idx[b]] into a (B, D) tensor.

    The index vector is constant under differentiation; gradients scatter
    back into the selected columns additively.
    """
    idx = np.asarray(idx, dtype=np.int64)
    d, k = w.data.shape
    if idx.min() < 0 or idx.max() >= k:
        raise IndexError(f"column index out of range [0, {k})")

    def grad_fn(g):
        dwt = np.zeros((k, d), dtype=w.data.dtype)
        np.add.at(dwt, idx, g)
        return (dwt.T.copy(),)

    return _result(w.data[:, idx].T.copy(), (w,), grad_fn)


# ---------------------------------------------------------------------------
# convolution, pooling, normalization
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,) or None.
    Output spatial size is floor((H + 2p - kh) / stride) + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d needs rank-4 input/weight, got {x.data.shape} and {weight.data.shape}"
        )
    b, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} larger than padded input "
            f"{(h + 2 * padding, w + 2 * padding)}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (B, Cin, Ho, Wo, kh, kw) strided view of all receptive fields
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    patches = view.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (patches @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        dw = db = dx = None
        if weight.requires_grad:
            dw = (g2.T @ patches).reshape(cout, cin, kh, kw)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # scatter grad * weight back onto the padded input
            gw = np.tensordot(g, weight.data, axes=([1], [0]))  # (B,Ho,Wo,Cin,kh,kw)
            dxp = np.zeros(
                (b, cin, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype
            )
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        gw[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            if padding:
                dx = dxp[:, :, padding:padding + h, padding:padding + w]
            else:
                dx = dxp
        if bias is None:
            return (dx, dw)
        return (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs rank-4 input, got {x.data.shape}")
    b, c, h, w = x.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), grad_fn)


@dataclass
class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channelwise batch normalization over a (B, C, H, W) tensor.

    Training mode normalizes by batch statistics (biased variance) and
    updates ``stats`` in place with the given momentum (variance stored
    unbiased). Eval mode normalizes by ``stats`` and leaves them alone.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d needs rank-4 input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    gd = gamma.data.reshape(1, c, 1, 1)

    if training:
        if b < 2:
            raise DegenerateBatchError(
                f"batch norm in train mode needs batch >= 2, got {b}"
            )
        n = b * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        stats.mean += momentum * (mean - stats.mean)
        stats.var += momentum * (var * n / (n - 1) - stats.var)
        out = xhat * gd + beta.data.reshape(1, c, 1, 1)

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * gd
                ivs = inv_std.reshape(1, c, 1, 1)
                sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = (ivs / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            return (dx, dgamma, dbeta)

        return _result(out, (x, gamma, beta), grad_fn)

    inv_std = 1.0 / np.sqrt(stats.var + eps)
    xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = g * gd * inv_std.reshape(1, c, 1, 1) if x.requires_grad else None
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be a 1-d index array, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    return labels


def softmax(x: Tensor) -> Tensor:
    """Rowwise softmax of a (B, K) tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax needs a (B, K) tensor, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), grad_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy needs (B, K) logits, got {logits.data.shape}")
    b, k = logits.data.shape
    labels = _check_labels(labels, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _result(loss, (logits,), grad_fn)


def _check_prob_rows(p: np.ndarray, what: str) -> None:
    if np.any(p < 0):
        raise NormalizationError(f"{what} has negative entries")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise NormalizationError(f"{what} rows do not sum to 1 within 1e-6")


def kl_divergence(p_ref: Tensor, q: Tensor, reduction: str = "mean") -> Tensor:
    """KL(p_ref || q) over probability rows, with 0 log 0 = 0.

    ``q`` is clamped below at 1e-12 before the log. ``reduction="none"``
    returns the per-row divergence (used for per-sample weighting in the
    misclassification-aware loss); the default returns the batch mean.
    Gradient flows into both arguments.
    """
    _check_same_shape(p_ref, q, "kl_divergence")
    if p_ref.data.ndim != 2:
        raise ShapeError(f"kl_divergence needs (B, K) tensors, got {p_ref.data.shape}")
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    _check_prob_rows(p_ref.data, "p_ref")
    _check_prob_rows(q.data, "q")
    b = p_ref.data.shape[0]
    pd = p_ref.data
    q_safe = np.maximum(q.data, 1e-12)
    log_p = np.log(np.where(pd > 0, pd, 1.0))
    log_q = np.log(q_safe)
    terms = pd * (log_p - log_q)
    rowkl = terms.sum(axis=1)

    def grad_fn(g):
        w = (g / b) if reduction == "mean" else g[:, None]
        dp = np.where(pd > 0, log_p - log_q + 1.0, 0.0) * w
        dq = np.where(q.data > 1e-12, -pd / q_safe, 0.0) * w
        return (dp, dq)

    if reduction == "mean":
        out = np.asarray(rowkl.mean(), dtype=pd.dtype)
    else:
        out = rowkl
    return _result(out, (p_ref, q), grad_fn)


def boosted_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p_y - log(1 - max_{k != y} p_k) over probability rows.

    Probabilities are clamped to [1e-12, 1 - 1e-12]; the runner-up index
    is a constant of differentiation.
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"boosted_cross_entropy needs (B, K) probs, got {probs.data.shape}")
    b, k = probs.data.shape
    labels = _check_labels(labels, k)
    _check_prob_rows(probs.data, "probs")
    lo, hi = 1e-12, 1.0 - 1e-12
    p = np.clip(probs.data, lo, hi)
    rows = np.arange(b)
    masked = p.copy()
    masked[rows, labels] = -np.inf
    runner = masked.argmax(axis=1)
    loss_rows = -np.log(p[rows, labels]) - np.log(1.0 - p[rows, runner])
    loss = np.asarray(loss_rows.mean(), dtype=p.dtype)

    def grad_fn(g):
        interior = (probs.data > lo) & (probs.data < hi)
        dp = np.zeros_like(probs.data)
        dp[rows, labels] = -1.0 / p[rows, labels]
        dp[rows, runner] += 1.0 / (1.0 - p[rows, runner])
        return (dp * interior * (g / b),)

    return _result(loss, (probs,), grad_fn)
