"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float64 array plus a gradient buffer.  Ops executed
while a ``Tape`` is active append their backward closures to the tape in
execution order (already topological); ``Tape.backward`` replays them in
reverse, accumulating into ``Tensor.grad``.  Without an active tape the
same ops run as plain forward computations, which is the inference path.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Misuse of a gradient tape (e.g. backward called twice)."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection on every op output; returns previous setting."""
    global _DEBUG_CHECKS
    previous = _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled
    return previous


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    previous = set_debug_checks(enabled)
    try:
        yield
    finally:
        set_debug_checks(previous)


class Tensor:
    """Dense float64 tensor with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; replays their backward closures once."""

    __slots__ = ("_ops", "_spent")

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) into .grad for every recorded node.

        A tape is single-use: calling backward a second time raises TapeError.
        """
        if self._spent:
            raise TapeError("backward() already ran on this tape")
        self._spent = True
        if loss.data.ndim != 0:
            raise ValueError("backward target must be a scalar")
        loss.grad = np.ones((), dtype=np.float64)
        for op in reversed(self._ops):
            op()


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own the buffer
    else:
        t.grad += g


def _make(data: np.ndarray, *parents: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by op")
    return out


def _record(out: Tensor, back: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is None or not out.requires_grad:
        return

    def step():
        if out.grad is not None:
            back(out.grad)

    tape._ops.append(step)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _make(a.data + b.data, a, b)

    def back(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, back)
    return out


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"subtract: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _make(a.data - b.data, a, b)

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    _record(out, back)
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"multiply: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _make(a.data * b.data, a, b)

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, back)
    return out


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make(a.data * c, a)

    def back(g):
        _accum(a, g * c)

    _record(out, back)
    return out


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: (R, C) + (C,)."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"add_bias: incompatible shapes {m.data.shape}, {b.data.shape}")
    out = _make(m.data + b.data, m, b)

    def back(g):
        _accum(m, g)
        _accum(b, g.sum(axis=0))

    _record(out, back)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _make(out_data, x)

    def back(g):
        _accum(x, g * out.data * (1.0 - out.data))

    _record(out, back)
    return out


def tanh(x: Tensor) -> Tensor:
    out = _make(np.tanh(x.data), x)

    def back(g):
        _accum(x, g * (1.0 - out.data * out.data))

    _record(out, back)
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), x)

    def back(g):
        # subgradient 0 at exactly 0
        _accum(x, g * (x.data > 0))

    _record(out, back)
    return out


def dropout(x: Tensor, drop_prob: float, rng: np.random.Generator,
            train: bool = True) -> Tensor:
    """Inverted dropout: scale kept entries by 1/(1-p) at train time, identity at eval."""
    if not train or drop_prob == 0.0:
        return x
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
    keep = (rng.random(x.data.shape) >= drop_prob) / (1.0 - drop_prob)
    out = _make(x.data * keep, x)

    def back(g):
        _accum(x, g * keep)

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product.

    Supports (m,k)@(k,n), (m,k)@(k,)->(m,), (k,)@(k,n)->(n,), and
    (k,)@(k,)->scalar.  A 1-D left operand against a matrix is the
    weighted sum of that matrix's rows.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} x {bd.shape}")
        out = _make(ad @ bd, a, b)

        def back(g):
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} x {bd.shape}")
        out = _make(ad @ bd, a, b)

        def back(g):
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} x {bd.shape}")
        out = _make(ad @ bd, a, b)

        def back(g):
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))

    elif ad.ndim == 1 and bd.ndim == 1:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} x {bd.shape}")
        out = _make(np.asarray(ad @ bd), a, b)

        def back(g):
            _accum(a, g * bd)
            _accum(b, g * ad)

    else:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim}, {bd.ndim}")

    _record(out, back)
    return out


def transpose(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    out = _make(m.data.T.copy(), m)

    def back(g):
        _accum(m, g.T)

    _record(out, back)
    return out


def trace(m: Tensor) -> Tensor:
    if m.data.ndim != 2 or m.data.shape[0] != m.data.shape[1]:
        raise ValueError("trace expects a square matrix")
    out = _make(np.asarray(np.trace(m.data)), m)
    n = m.data.shape[0]

    def back(g):
        _accum(m, float(g) * np.eye(n))

    _record(out, back)
    return out


def add_scaled_identity(m: Tensor, s: Tensor) -> Tensor:
    """m + s*I with scalar tensor s."""
    if m.data.ndim != 2 or m.data.shape[0] != m.data.shape[1]:
        raise ValueError("add_scaled_identity expects a square matrix")
    if s.data.ndim != 0:
        raise ValueError("scale must be a scalar tensor")
    n = m.data.shape[0]
    out = _make(m.data + float(s.data) * np.eye(n), m, s)

    def back(g):
        _accum(m, g)
        _accum(s, np.asarray(np.trace(g)))

    _record(out, back)
    return out


def inverse(m: Tensor) -> Tensor:
    """Matrix inverse; d(M^-1) propagates as -Y^T g Y^T with Y = M^-1."""
    if m.data.ndim != 2 or m.data.shape[0] != m.data.shape[1]:
        raise ValueError("inverse expects a square matrix")
    try:
        inv = np.linalg.inv(m.data)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(m.data))
        raise ValueError(f"matrix inverse failed (condition number {cond:.3e})") from exc
    if not np.all(np.isfinite(inv)):
        cond = float(np.linalg.cond(m.data))
        raise ValueError(f"matrix inverse not finite (condition number {cond:.3e})")
    out = _make(inv, m)

    def back(g):
        _accum(m, -(inv.T @ g @ inv.T))

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# selection / shaping
# ---------------------------------------------------------------------------

def row_select(m: Tensor, indices) -> Tensor:
    """Gather rows (embedding lookup); repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if m.data.ndim != 2:
        raise ValueError("row_select expects a matrix")
    if idx.size and (idx.min() < 0 or idx.max() >= m.data.shape[0]):
        raise IndexError("row_select index out of range")
    out = _make(m.data[idx], m)

    def back(g):
        if not m.requires_grad:
            return
        if m.grad is None:
            m.grad = np.zeros_like(m.data)
        np.add.at(m.grad, idx, g)

    _record(out, back)
    return out


def row(m: Tensor, i: int) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("row expects a matrix")
    out = _make(m.data[i].copy(), m)

    def back(g):
        if not m.requires_grad:
            return
        if m.grad is None:
            m.grad = np.zeros_like(m.data)
        m.grad[i] += g

    _record(out, back)
    return out


def slice1d(v: Tensor, start: int, stop: int) -> Tensor:
    if v.data.ndim != 1:
        raise ValueError("slice1d expects a vector")
    out = _make(v.data[start:stop].copy(), v)

    def back(g):
        if not v.requires_grad:
            return
        if v.grad is None:
            v.grad = np.zeros_like(v.data)
        v.grad[start:stop] += g

    _record(out, back)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    for p in parts:
        if p.data.ndim != 1:
            raise ValueError("concat expects vectors")
    out = _make(np.concatenate([p.data for p in parts]), *parts)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    _record(out, back)
    return out


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    rows = list(rows)
    if not rows:
        raise ValueError("stack_rows of zero tensors")
    for r in rows:
        if r.data.ndim != 1:
            raise ValueError("stack_rows expects vectors")
    out = _make(np.stack([r.data for r in rows]), *rows)

    def back(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = _make(np.asarray(x.data.sum()), x)

    def back(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    _record(out, back)
    return out


def mean_rows(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("mean_rows expects a matrix")
    n = m.data.shape[0]
    out = _make(m.data.mean(axis=0), m)

    def back(g):
        _accum(m, np.broadcast_to(g / n, m.data.shape))

    _record(out, back)
    return out


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm; subgradient 0 at the origin."""
    if x.data.size < 1:
        raise ValueError("l2_norm of empty tensor")
    norm = float(np.sqrt((x.data * x.data).sum()))
    out = _make(np.asarray(norm), x)

    def back(g):
        if norm > 0.0:
            _accum(x, (float(g) / norm) * x.data)

    _record(out, back)
    return out


def row_norms(m: Tensor) -> Tensor:
    """Per-row Euclidean norms of a matrix; zero rows get subgradient 0."""
    if m.data.ndim != 2:
        raise ValueError("row_norms expects a matrix")
    norms = np.sqrt((m.data * m.data).sum(axis=1))
    out = _make(norms, m)

    def back(g):
        scale = np.where(norms > 0.0, g / np.where(norms > 0.0, norms, 1.0), 0.0)
        _accum(m, m.data * scale[:, None])

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a vector of length >= 1."""
    if x.data.ndim != 1 or x.data.shape[0] < 1:
        raise ValueError("softmax expects a non-empty vector")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    p = e / e.sum()
    out = _make(p, x)

    def back(g):
        dot = float((g * p).sum())
        _accum(x, p * (g - dot))

    _record(out, back)
    return out


def masked_softmax(x: Tensor, keep) -> Tensor:
    """Softmax restricted to kept positions; masked positions get exactly 0."""
    keep = np.asarray(keep, dtype=bool)
    if x.data.ndim != 1 or keep.shape != x.data.shape:
        raise ValueError("masked_softmax expects a vector and a matching mask")
    if not keep.any():
        raise ValueError("masked_softmax: mask keeps no positions")
    shifted = np.where(keep, x.data - x.data[keep].max(), -np.inf)
    e = np.exp(shifted)
    p = e / e.sum()
    out = _make(p, x)

    def back(g):
        dot = float((g * p).sum())
        _accum(x, p * (g - dot))  # p is exactly 0 at masked positions

    _record(out, back)
    return out


def cross_entropy_with_logits(logits: Tensor, gold_indices) -> Tensor:
    """-mean over gold indices of log softmax(logits); fused for stability."""
    idx = np.asarray(gold_indices, dtype=np.intp)
    if logits.data.ndim != 1 or idx.size < 1:
        raise ValueError("cross_entropy_with_logits expects a vector and >=1 gold index")
    if idx.min() < 0 or idx.max() >= logits.data.shape[0]:
        raise IndexError("gold index out of range")
    m = logits.data.max()
    e = np.exp(logits.data - m)
    lse = m + np.log(e.sum())
    loss = lse - float(logits.data[idx].mean())
    out = _make(np.asarray(loss), logits)
    p = e / e.sum()

    def back(g):
        target = np.zeros_like(logits.data)
        np.add.at(target, idx, 1.0 / idx.size)
        _accum(logits, float(g) * (p - target))

    _record(out, back)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[], Tensor], param: Tensor,
                               eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f() wrt param, one entry at a time.

    f must recompute its value from param.data on every call; no tape is
    involved, so this stays independent of the reverse-mode path.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, 1)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
