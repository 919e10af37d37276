"""Dense 2-D tensors with define-by-run reverse-mode differentiation.

Every array is float64.  Operations executed while a :class:`Tape` is active
(and with at least one input that requires a gradient) are recorded on that
tape; ``tape.backward(loss)`` then walks the record in reverse exactly once.

A tape belongs to the thread that created it.  Recording onto it or running
its backward pass from any other thread raises :class:`ContractError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NormalizationError, NumericError

DTYPE = np.float64
MASK_VALUE = -1e9
GELU_C = math.sqrt(2.0 / math.pi)
DEFAULT_FD_STEP = 1e-5

_local = threading.local()
_tape_ids = itertools.count()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A rows x cols float64 matrix that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got array with shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # internal constructor: trusts arr to be a fresh float64 2-D array
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tape_id = None
        t._tape = None
        t.name = None
        return t

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.rows}x{self.cols}{flag})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  Nesting is allowed: the innermost tape records.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes = []
        self.consumed = False
        self._thread = threading.get_ident()

    def _check_thread(self):
        if threading.get_ident() != self._thread:
            raise ContractError("a Tape may only be used by the thread that created it")

    def __enter__(self):
        self._check_thread()
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn, kind):
        self._check_thread()
        if self.consumed:
            raise ContractError("cannot record onto a tape after backward")
        out.tape_id = (self.id, len(self.nodes))
        out._tape = self
        self.nodes.append((kind, inputs, out, backward_fn))

    def backward(self, loss):
        self._check_thread()
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if self.consumed:
            raise ContractError("backward already ran on this tape")
        self.consumed = True
        loss.grad = np.ones((1, 1), dtype=DTYPE)
        for _kind, inputs, out, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=DTYPE, copy=True)
                else:
                    inp.grad += gi
        # break reference cycles; intermediate grads are kept on the tensors
        self.nodes = []


@contextlib.contextmanager
def no_grad():
    """Suspend recording: forward passes inside run untaped."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backward(loss):
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``."""
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not on an active tape")
    tape.backward(loss)


def _record(kind, out_data, inputs, backward_fn):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        tape.record(out, inputs, backward_fn, kind)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- algebra


def matmul(a, b):
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record("matmul", A @ B, (a, b), bw)


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _record("add", a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _record("sub", a.data - c, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c):
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record("gelu", out, (a,), bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op_kind, a, b=None):
    """Dispatch by name: add, sub, mul, scale (b is a scalar) or gelu (b unused)."""
    if op_kind == "gelu":
        return gelu(a)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


def add_bias(a, bias):
    """Add a column vector (rows x 1) to every column of ``a``."""
    if bias.shape != (a.rows, 1):
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {a.shape}")
    return _record("add_bias", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=1, keepdims=True)))


def linear(w, h, b):
    """Affine map ``w @ h + b`` with ``b`` a column broadcast over columns."""
    if w.cols != h.rows:
        raise DimensionError(f"linear: cannot multiply {w.shape} by {h.shape}")
    if b.shape != (w.rows, 1):
        raise DimensionError(f"linear: bias {b.shape} does not fit {w.rows} outputs")
    W, H = w.data, h.data

    def bw(g):
        return (
            g @ H.T if w.requires_grad else None,
            W.T @ g if h.requires_grad else None,
            g.sum(axis=1, keepdims=True),
        )

    return _record("linear", W @ H + b.data, (w, h, b), bw)


def add_row_bias(a, bias):
    """Add a row vector (1 x cols) to every row of ``a``."""
    if bias.shape != (1, a.cols):
        raise DimensionError(f"add_row_bias: bias {bias.shape} does not fit {a.shape}")
    return _record("add_row_bias", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def add_constant(a, const):
    """Add a fixed array (no gradient), e.g. an additive attention mask."""
    const = np.asarray(const, dtype=DTYPE)
    if const.shape != a.shape:
        raise DimensionError(f"add_constant: {const.shape} does not match {a.shape}")
    return _record("add_constant", a.data + const, (a,), lambda g: (g,))


def transpose(a):
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def sum_all(a):
    shape = a.shape
    return _record("sum", np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


# ------------------------------------------------------------- structure


def concat_cols(a, b):
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    p = a.cols
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat_cols", out, (a, b), lambda g: (g[:, :p], g[:, p:]))


def slice_cols(a, start, stop):
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"slice_cols: [{start}, {stop}) out of bounds for {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", a.data[:, start:stop].copy(), (a,), bw)


def split_cols(a, p):
    """Inverse of :func:`concat_cols`: columns ``[0, p)`` and ``[p, cols)``."""
    if not 0 < p < a.cols:
        raise DimensionError(f"split_cols: split point {p} out of bounds for {a.shape}")
    return slice_cols(a, 0, p), slice_cols(a, p, a.cols)


def take_cols(table, index):
    """Gather columns ``table[:, index]``; gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("take_cols: index must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= table.cols:
        raise DimensionError(f"take_cols: index out of range for {table.shape}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return _record("take_cols", table.data[:, idx], (table,), bw)


# --------------------------------------------------------- normalisation


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax_rows(a):
    _check_finite(a.data, "softmax_rows")
    y = _softmax(a.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", y, (a,), bw)


def layer_norm(a, gain, bias, eps=1e-5, axis=1):
    """Standardise each row (population variance) then apply gain and bias.

    With ``axis=0`` columns are standardised instead and gain/bias are
    rows x 1; this equals transposing, normalising rows and transposing back.
    """
    want = (1, a.cols) if axis == 1 else (a.rows, 1)
    if gain.shape != want or bias.shape != want:
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not fit {a.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.data
    other = 1 - axis
    r = 1.0 / x.shape[axis]
    xc = x - x.sum(axis=axis, keepdims=True) * r
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=axis, keepdims=True) * r + eps)
    xhat = xc * inv
    G = gain.data

    def bw(g):
        dxhat = g * G
        dx = inv * (
            dxhat
            - dxhat.sum(axis=axis, keepdims=True) * r
            - xhat * ((dxhat * xhat).sum(axis=axis, keepdims=True) * r)
        )
        return dx, (g * xhat).sum(axis=other, keepdims=True), g.sum(axis=other, keepdims=True)

    return _record("layer_norm", xhat * G + bias.data, (a, gain, bias), bw)


# ----------------------------------------------------------------- losses


def _targets(logits, target):
    idx = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if idx.shape != (logits.rows,):
        raise LabelError(f"expected {logits.rows} target indices, got {idx.shape[0]}")
    if idx.min() < 0 or idx.max() >= logits.cols:
        raise LabelError(f"target index out of range for {logits.cols} candidates")
    return idx


def cross_entropy(logits, target):
    """Mean over rows of ``-log softmax(row)[target]``.

    ``target`` is one index for a single-row tensor or one index per row.
    """
    idx = _targets(logits, target)
    _check_finite(logits.data, "cross_entropy")
    logp = _log_softmax(logits.data)
    n = logits.rows
    rows = np.arange(n)
    loss = -logp[rows, idx].sum() / n

    def bw(g):
        d = np.exp(logp)
        d[rows, idx] -= 1.0
        return (d * (g[0, 0] / n),)

    return _record("cross_entropy", np.array([[loss]]), (logits,), bw)


def kl_divergence(p_fixed, q_logits):
    """Mean over rows of KL(p || softmax(q)); ``p_fixed`` carries no gradient."""
    p = np.atleast_2d(np.asarray(p_fixed, dtype=DTYPE))
    if p.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence: p {p.shape} vs logits {q_logits.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise NormalizationError("kl_divergence: p rows must be distributions summing to 1")
    _check_finite(q_logits.data, "kl_divergence")
    logq = _log_softmax(q_logits.data)
    pos = p > 0
    logp = np.zeros_like(p)
    logp[pos] = np.log(p[pos])
    n = p.shape[0]
    loss = (np.where(pos, p * (logp - logq), 0.0)).sum() / n

    def bw(g):
        return ((np.exp(logq) - p) * (g[0, 0] / n),)

    return _record("kl_divergence", np.array([[loss]]), (q_logits,), bw)


# -------------------------------------------------------------- attention


def attention_probs(q, k, n_heads, mask_add=None):
    """Per-head attention weights, shape (heads, len_q, len_k), as numpy."""
    d, n = q.shape
    dh = d // n_heads
    Q = q.reshape(n_heads, dh, n)
    K = k.reshape(n_heads, dh, k.shape[1])
    s = np.matmul(Q.transpose(0, 2, 1), K) * (1.0 / math.sqrt(dh))
    if mask_add is not None:
        s = s + mask_add
    return _softmax(s)


def attention(q, k, v, n_heads, mask_add=None):
    """Multi-head scaled dot-product attention on d x len column layouts.

    Head ``h`` owns rows ``[h*d/heads, (h+1)*d/heads)`` of ``q``, ``k`` and
    ``v``.  ``mask_add`` is a fixed len x len additive mask (0 or -1e9).
    The result stacks the heads back into a d x len matrix.
    """
    _check_same(q, k, "attention q/k")
    _check_same(q, v, "attention q/v")
    d, n = q.shape
    if d % n_heads:
        raise DimensionError(f"attention: width {d} not divisible by {n_heads} heads")
    if mask_add is not None:
        mask_add = np.asarray(mask_add, dtype=DTYPE)
        if mask_add.shape != (n, n):
            raise DimensionError(f"attention: mask {mask_add.shape} does not fit length {n}")
    dh = d // n_heads
    c = 1.0 / math.sqrt(dh)
    Q = q.data.reshape(n_heads, dh, n)
    K = k.data.reshape(n_heads, dh, n)
    V = v.data.reshape(n_heads, dh, n)
    A = attention_probs(q.data, k.data, n_heads, mask_add)
    out = np.matmul(V, A.transpose(0, 2, 1)).reshape(d, n)

    def bw(g):
        G = g.reshape(n_heads, dh, n)
        dV = np.matmul(G, A)
        dA = np.matmul(G.transpose(0, 2, 1), V)
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * c
        dQ = np.matmul(K, dS.transpose(0, 2, 1))
        dK = np.matmul(Q, dS)
        return dQ.reshape(d, n), dK.reshape(d, n), dV.reshape(d, n)

    return _record("attention", out, (q, k, v), bw)


# ------------------------------------------------------------ grad oracle


def finite_diff_check(
    f: Callable,
    x,
    h: float = DEFAULT_FD_STEP,
    floor: float = 1e-3,
) -> float:
    """Largest relative error between backward and central differences.

    ``f(x)`` must return a scalar Tensor; ``x`` is a Tensor or a sequence of
    Tensors whose entries are perturbed one at a time.  Per coordinate the
    error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``, so
    gradients smaller than ``floor`` are judged on an absolute scale.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = [x] if isinstance(x, Tensor) else list(x)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(x)
    if loss._tape is None:
        raise ContractError("f(x) did not depend on any grad-requiring input")
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = f(x).item()
            flat[i] = orig - h
            with no_grad():
                down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
