"""A small reverse-mode differentiation core over dense numpy arrays.

Only the primitives the factorization networks need are provided.  Values are
stored as 1-D or 2-D numpy arrays; the dtype of the inputs is preserved, so a
graph built from float64 parameters runs entirely in float64 (used by the
finite-difference checks) while training runs in float32.

A graph is built eagerly: every primitive returns a :class:`Tensor` that keeps
references to its parents and a closure mapping the output gradient to parent
gradients.  :meth:`Tensor.backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteError

POOL_EPS = 1e-10
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
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
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else scale(other, -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = _finite(np.asarray(data), op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def parameter(x) -> Tensor:
    """Wrap an array as a leaf that collects gradients."""
    return Tensor(np.asarray(x), requires_grad=True)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        # scalar or constant array of identical shape
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


_kink_log: list[np.ndarray] | None = None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype)

    def backward(g):
        return (g * _sigmoid(x.data),)

    return _make(out, (x,), backward, "softplus")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z)).astype(z.dtype)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(x.data.sum(), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def squared_error(pred: Tensor, target) -> Tensor:
    """Half the summed squared difference, ``0.5 * ||pred - target||^2``."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target_data.shape:
        raise ValueError(f"squared_error: shape mismatch {pred.shape} vs {target_data.shape}")
    diff = pred.data - target_data
    out = 0.5 * np.sum(diff * diff)
    if isinstance(target, Tensor):
        return _make(out, (pred, target), lambda g: (g * diff, -g * diff), "squared_error")
    return _make(out, (pred,), lambda g: (g * diff,), "squared_error")


def logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of an N x K matrix, returned as an (N,) vector."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    p = e / s
    return _make(out, (x,), lambda g: (g[:, None] * p,), "logsumexp")


# ---------------------------------------------------------------- row-wise maps


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an N x K matrix."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- layers


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` N x I, ``w`` I x O and ``b`` of length O."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"affine: input dim {x.shape[1]} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is None:
        return _make(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g), "affine")
    out = out + b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), backward, "affine")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-feature batch normalization over the rows of ``x``.

    In training mode the batch statistics (population variance) normalize the
    input and the running buffers are updated in place.  In inference mode the
    running buffers are used.
    """
    if training:
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    n = x.shape[0]

    def backward(g):
        dxhat = g * gamma.data
        if training:
            dx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
        else:
            dx = dxhat * inv_std
        return dx, np.sum(g * xhat, axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tensors, backward, "concat")


def _lengths_or_all(x: Tensor, lengths: Iterable[int] | None) -> np.ndarray:
    if lengths is None:
        return np.array([x.shape[0]], dtype=np.int64)
    lengths = np.asarray(list(lengths), dtype=np.int64)
    if lengths.sum() != x.shape[0] or np.any(lengths < 1):
        raise ValueError("segment lengths must be positive and sum to the number of rows")
    return lengths


def splice_index(lengths: np.ndarray, context: Sequence[int]) -> np.ndarray:
    """Row indices (N x C) of spliced frames with edge replication per segment."""
    context = np.asarray(context, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    seg_start = np.repeat(starts, lengths)
    seg_end = np.repeat(starts + lengths - 1, lengths)
    rows = np.arange(int(lengths.sum()))
    idx = rows[:, None] + context[None, :]
    return np.clip(idx, seg_start[:, None], seg_end[:, None])


def splice(x: Tensor, context: Sequence[int], lengths: Iterable[int] | None = None) -> Tensor:
    """Concatenate frames ``t + c`` for each offset ``c``; out-of-range offsets replicate the edge.

    ``lengths`` splits the rows of ``x`` into independent sequences; splicing
    never crosses a sequence boundary.
    """
    context = list(context)
    if not context:
        raise ValueError("splice: empty context")
    if x.shape[0] == 0:
        raise ValueError("splice: empty input")
    if any(b < a for a, b in zip(context, context[1:])):
        raise ValueError("splice: context offsets must be sorted ascending")
    lengths = _lengths_or_all(x, lengths)
    n, d = x.shape
    c = len(context)
    idx = splice_index(lengths, context).ravel()
    out = x.data[idx].reshape(n, c * d)

    def backward(g):
        scatter = sp.csr_matrix(
            (np.ones(n * c, dtype=g.dtype), (idx, np.arange(n * c))), shape=(n, n * c)
        )
        return (np.asarray(scatter @ g.reshape(n * c, d)),)

    return _make(out, (x,), backward, "splice")


def stats_pool(x: Tensor, lengths: Iterable[int] | None = None, eps: float = POOL_EPS) -> Tensor:
    """Per-segment mean and standard deviation, one row ``[mean, sqrt(var + eps)]`` per segment."""
    if x.shape[0] == 0:
        raise ValueError("stats_pool: empty input")
    lengths = _lengths_or_all(x, lengths)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    counts = lengths[:, None].astype(x.dtype)
    mean = np.add.reduceat(x.data, starts, axis=0) / counts
    centered = x.data - np.repeat(mean, lengths, axis=0)
    var = np.add.reduceat(centered * centered, starts, axis=0) / counts
    std = np.sqrt(var + eps)
    out = np.concatenate([mean, std], axis=1)
    d = x.shape[1]

    def backward(g):
        g_mean = np.repeat(g[:, :d] / counts, lengths, axis=0)
        g_std = np.repeat(g[:, d:] / (counts * std), lengths, axis=0)
        return (g_mean + g_std * centered,)

    return _make(out, (x,), backward, "stats_pool")


def expand_rows(v: Tensor, lengths: Iterable[int]) -> Tensor:
    """Repeat row ``i`` of ``v`` ``lengths[i]`` times."""
    lengths = np.asarray(list(lengths), dtype=np.int64)
    if lengths.shape[0] != v.shape[0]:
        raise ValueError("expand_rows: one length per row required")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    out = np.repeat(v.data, lengths, axis=0)
    return _make(out, (v,), lambda g: (np.add.reduceat(g, starts, axis=0),), "expand_rows")


# ---------------------------------------------------------------- gradient check


def _evaluate_recording(f, tensors) -> tuple[float, list[np.ndarray]]:
    global _kink_log
    _kink_log = []
    try:
        value = float(f(tensors).data)
        return value, _kink_log
    finally:
        _kink_log = None


def _same_masks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    seed: int = 0,
    n_probe: int = 24,
    h: float = 1e-4,
    return_details: bool = False,
):
    """Maximum relative error between analytic and central-difference gradients.

    ``f`` maps a dict of parameter tensors to a scalar tensor.  All parameters
    are promoted to float64 before either gradient is computed.  Up to
    ``n_probe`` entries are drawn in random order among the parameters that
    ``f`` actually depends on.  The function is not differentiable on a
    ReLU kink, so a probe whose ``+h`` or ``-h`` evaluation flips any ReLU
    activation pattern is skipped and the next entry is used instead.

    With ``return_details`` a ``(max_error, n_checked, n_skipped)`` tuple is
    returned.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: parameter(v) for k, v in base.items()}
    loss = f(leaves)
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss at the probe point")
    loss.backward()
    # leaves that f never touches carry no gradient and are not probed
    analytic = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    _, masks = _evaluate_recording(f, {k: Tensor(v) for k, v in base.items()})

    entries = [(k, i) for k in analytic for i in range(base[k].size)]
    order = np.random.default_rng(seed).permutation(len(entries))
    worst, checked, skipped = 0.0, 0, 0
    for j in order:
        if checked == n_probe:
            break
        key, i = entries[j]
        flat = base[key].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up, up_masks = _evaluate_recording(f, {k: Tensor(v) for k, v in base.items()})
        flat[i] = orig - h
        down, down_masks = _evaluate_recording(f, {k: Tensor(v) for k, v in base.items()})
        flat[i] = orig
        if not (_same_masks(masks, up_masks) and _same_masks(masks, down_masks)):
            skipped += 1
            continue
        fd = (up - down) / (2 * h)
        a = float(analytic[key].reshape(-1)[i])
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        checked += 1
    if return_details:
        return worst, checked, skipped
    return worst
