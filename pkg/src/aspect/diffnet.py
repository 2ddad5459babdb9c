"""Small dense reverse-mode autodiff on numpy arrays.

Operations executed while a :class:`Tape` is active record a backward rule
whenever one of their inputs requires a gradient. ``tape.backward(loss)``
replays the records in reverse recording order.

    with Tape() as tape:
        loss = sum(mul(W, W))
    tape.backward(loss)   # W.grad == 2 * W.data
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

_TAPES = []


def current_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    def __init__(self):
        self.records = []
        self._used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, rule):
        self.records.append((out, inputs, rule))

    def reset(self):
        self.records = []
        self._used = False

    def backward(self, loss):
        """Accumulate d(loss)/dt into ``.grad`` of every leaf that requires grad.

        Returns a dict mapping ``id(tensor)`` to the gradient for every tensor
        reached, leaves and intermediates alike.
        """
        if self._used:
            raise RuntimeError("tape already consumed; call reset() before a second backward")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                k = id(inp)
                grads[k] = gi if k not in grads else grads[k] + gi
        seen = set()
        for out, inputs, _ in self.records:
            for t in (*inputs, out):
                if isinstance(t, Tensor) and t.is_leaf and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    g = grads.get(id(t))
                    if g is not None:
                        t.grad = g.copy() if t.grad is None else t.grad + g
        if loss.is_leaf and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return grads


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.grad = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, rule):
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def _need(t):
    return t.requires_grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if _need(a) else None,
                            _unbroadcast(g, b.shape) if _need(b) else None))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if _need(a) else None,
                            _unbroadcast(-g, b.shape) if _need(b) else None))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if _need(a) else None,
                            _unbroadcast(g * a.data, b.shape) if _need(b) else None))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    q = a.data / b.data
    return _make(q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if _need(a) else None,
                            _unbroadcast(-g * q / b.data, b.shape) if _need(b) else None))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if _need(a) else None,
                            a.data.T @ g if _need(b) else None))


def lincomb(w, terms):
    """sum_k w[k] * terms[k] for a coefficient vector ``w`` and equal-shape tensors."""
    w = as_tensor(w)
    terms = [as_tensor(t) for t in terms]
    if w.shape != (len(terms),):
        raise ValueError("lincomb: one coefficient per term required")
    out = w.data[0] * terms[0].data
    for k in range(1, len(terms)):
        out = out + w.data[k] * terms[k].data

    def rule(g):
        gw = np.array([np.vdot(g, t.data) for t in terms]) if _need(w) else None
        return (gw,) + tuple(w.data[k] * g if _need(t) else None for k, t in enumerate(terms))

    return _make(out, (w, *terms), rule)


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_cols(ts):
    ts = [as_tensor(t) for t in ts]
    widths = [t.shape[1] for t in ts]
    if len({t.shape[0] for t in ts}) != 1:
        raise ValueError("concat_cols: row counts differ")
    cuts = np.cumsum([0] + widths)

    def rule(g):
        return tuple(g[:, cuts[i]:cuts[i + 1]] for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=1), tuple(ts), rule)


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def clamp_min(x, lo=0.0):
    """max(x, lo); gradient passes wherever x >= lo and is zero strictly below."""
    mask = x.data >= lo
    return _make(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,))


def prelu(x, alpha):
    """Leaky rectifier with a learnable slope ``alpha`` (scalar or per column)."""
    alpha = as_tensor(alpha)
    pos = x.data > 0
    out = np.where(pos, x.data, alpha.data * x.data)

    def rule(g):
        gx = g * np.where(pos, 1.0, alpha.data)
        ga = _unbroadcast(np.where(pos, 0.0, g * x.data), alpha.shape)
        return gx, ga

    return _make(out, (x, alpha), rule)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x):
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x, p):
    out = np.power(x.data, p)
    return _make(out, (x,), lambda g: (g * p * np.power(x.data, p - 1),))


def dropout(x, mask):
    """Multiply by a precomputed (already rescaled) mask."""
    mask = np.asarray(mask, dtype=np.float64)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def dropout_mask(rng, shape, p):
    if p <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), rule)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def row_dot(a, b):
    """Row-wise inner products, returned as an (N,) vector."""
    return sum(mul(a, b), axis=1)


def row_normalize(x, eps=1e-12):
    nrm = np.sqrt(np.sum(x.data ** 2, axis=1, keepdims=True))
    nrm = np.maximum(nrm, eps)
    y = x.data / nrm

    def rule(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / nrm,)

    return _make(y, (x,), rule)


def logsumexp(x, axis=1):
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def rule(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (x,), rule)


def index(x, i):
    """Basic indexing (ints, slices, integer arrays along axis 0)."""
    out = x.data[i]
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, i, g)
        return (full,)

    return _make(out, (x,), rule)


def _segment_matrix(idx, n):
    idx = np.asarray(idx)
    return sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))


def gather_rows(x, idx):
    """x[idx] along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def rule(g):
        S = _segment_matrix(idx, n)
        return (np.asarray(S @ g).reshape((n,) + g.shape[1:]),)

    return _make(x.data[idx], (x,), rule)


def segment_sum(vals, idx, n):
    """out[k] = sum of vals[e] over e with idx[e] == k (1-D values)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.bincount(idx, weights=vals.data, minlength=n).astype(np.float64)
    return _make(out, (vals,), lambda g: (g[idx],))


def spmm(rows, cols, vals, X, n, A=None):
    """Sparse (n x n) matrix with entries ``vals`` at (rows, cols) times dense X.

    Differentiable in both the entry values and X; O(nnz * F). ``A`` may pass
    the already assembled scipy matrix for ``vals``.
    """
    vals = as_tensor(vals)
    X = as_tensor(X)
    if A is None:
        A = sp.csr_matrix((vals.data, (rows, cols)), shape=(n, n))
    out = A @ X.data

    def rule(g):
        gX = A.T @ g if X.requires_grad else None
        gv = np.einsum("ij,ij->i", g[rows], X.data[cols]) if vals.requires_grad else None
        return gv, gX

    return _make(out, (vals, X), rule)


# ---------------------------------------------------------------------------
# contrastive loss


def info_nce(U, V, tau, reduction="mean", max_negatives=None, rng=None):
    """InfoNCE between query rows of U and key rows of V.

    Row v of U is pulled towards row v of V and pushed from every other row of
    V (full batch). Rows are L2-normalised first so similarities are cosines.
    With ``max_negatives`` set and fewer keys allowed than rows, a uniform
    subset of keys serves as the shared negative pool.

    reduction: "mean", "sum" or "none" (per-row losses, shape (N,)).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    U, V = as_tensor(U), as_tensor(V)
    if U.shape != V.shape:
        raise ValueError(f"info_nce shape mismatch {U.shape} vs {V.shape}")
    u = row_normalize(U)
    v = row_normalize(V)
    n = U.shape[0]
    pos = mul(row_dot(u, v), 1.0 / tau)
    if max_negatives is not None and n > max_negatives:
        rng = rng if rng is not None else np.random.default_rng(0)
        keys = np.sort(rng.choice(n, size=max_negatives, replace=False))
        S = mul(matmul(u, transpose(gather_rows(v, keys))), 1.0 / tau)
        # a sampled key equal to the query's own positive is not a negative
        block = np.where(keys[None, :] == np.arange(n)[:, None], -np.inf, 0.0)
        S = add(S, block)
        lse = logsumexp(concat_cols([reshape(pos, (n, 1)), S]), axis=1)
    else:
        S = mul(matmul(u, transpose(v)), 1.0 / tau)
        lse = logsumexp(S, axis=1)
    per_row = sub(lse, pos)
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return sum(per_row)
    return mean(per_row)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr, weight_decay=0.0):
    """One Adam update with decoupled weight decay, in place on numpy arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over parameter groups ``[{"params": [...], "lr": ..., "weight_decay": ...}]``."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = [dict(g) for g in groups]
        self.states = [AdamState(beta1=betas[0], beta2=betas[1], eps=eps) for _ in self.groups]

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self):
        for g, st in zip(self.groups, self.states):
            ps = g["params"]
            adam_step([p.data for p in ps], [p.grad for p in ps], st,
                      g["lr"], g.get("weight_decay", 0.0))
