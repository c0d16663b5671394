"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Define-by-run: ops executed inside a ``with Tape()`` block are recorded in
order; ``tape.backward(loss)`` replays them once in reverse. Outside any
tape, ops just compute values (evaluation mode, no graph kept).

Only the primitives the model needs are provided: matmul, sparse-dense
multiply, elementwise arithmetic, sigmoid/tanh/relu/exp/log, clipping,
concatenation, row gather/update, segment mean, reductions, dropout, and
the Adam optimizer. Everything is float64: the gradient checks that back
the test suite need the headroom.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError

# When True every forward op asserts its output is finite. Slow; the test
# suite switches it on.
DEBUG_CHECKS = False


def set_debug_checks(flag: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(flag)


class Tensor:
    """A 2-D float64 value, optionally marked as trainable."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_rec")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if arr.ndim != 2:
            raise ContractError(f"tensors are 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._rec = False

    @classmethod
    def _wrap(cls, arr):
        # op outputs are known-good 2-D float64; skip the checks
        t = object.__new__(cls)
        t.values = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._rec = False
        return t

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on non-scalar tensor {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} {self.shape[0]}x{self.shape[1]} grad={self.requires_grad}>"


def tensor(values, requires_grad=False, name=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


class _Node:
    __slots__ = ("out", "inputs", "needs", "vjp")

    def __init__(self, out, inputs, needs, vjp):
        self.out = out
        self.inputs = inputs
        self.needs = needs
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of ops; backward visits it exactly once in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor, params=None) -> None:
        """Accumulate d loss / d t into t.grad for every tensor on the path.

        ``params`` (optional iterable) additionally get zero gradients when
        the loss does not depend on them.
        """
        if loss.values.shape != (1, 1):
            raise ContractError(f"backward needs a scalar loss, got {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones((1, 1))
        else:
            loss.grad = loss.grad + np.ones((1, 1))
        for node in reversed(self.nodes):
            g_out = node.out.grad
            if g_out is None:
                continue
            grads = node.vjp(g_out)
            for inp, needed, g in zip(node.inputs, node.needs, grads):
                if not needed or g is None:
                    continue
                # accumulation always builds a fresh array, so aliasing the
                # vjp output here is safe
                inp.grad = g if inp.grad is None else inp.grad + g
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.values)


def _record(out: Tensor, inputs, vjp) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(out.values)):
        raise ContractError("non-finite values produced by a forward op")
    if _TAPES:
        needs = tuple(t.requires_grad or t._rec for t in inputs)
        if any(needs):
            out._rec = True
            _TAPES[-1].nodes.append(_Node(out, tuple(inputs), needs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.values + b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.values - b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(Tensor._wrap(-a.values), (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    out = Tensor._wrap(av * bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(Tensor._wrap(a.values * c), (a,), lambda g: (g * c,))


def sadd(a: Tensor, c: float) -> Tensor:
    return _record(Tensor._wrap(a.values + float(c)), (a,), lambda g: (g,))


def reciprocal(a: Tensor) -> Tensor:
    inv = 1.0 / a.values
    return _record(Tensor._wrap(inv), (a,), lambda g: (-g * inv * inv,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = Tensor._wrap(av @ bv)
    return _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(adj, x: Tensor) -> Tensor:
    """Sparse-times-dense product with a constant symmetric adjacency.

    Backward uses the same matrix: grad_x = A^T g = A g by symmetry.
    """
    if adj.shape[1] != x.shape[0]:
        raise ContractError(f"spmm shape mismatch {adj.shape} @ {x.shape}")
    out = Tensor._wrap(adj @ x.values)
    return _record(out, (x,), lambda g: (adj @ g,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    # stable at both tails: sigma(x) = (tanh(x/2) + 1) / 2
    s = 0.5 * (np.tanh(0.5 * a.values) + 1.0)
    out = Tensor._wrap(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)
    return _record(Tensor._wrap(t), (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _record(Tensor._wrap(np.where(mask, a.values, 0.0)), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.values)
    return _record(Tensor._wrap(e), (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    v = a.values
    return _record(Tensor._wrap(np.log(v)), (a,), lambda g: (g / v,))


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes through only where nothing clamped."""
    v = a.values
    mask = np.ones(v.shape, dtype=bool)
    if lo is not None:
        mask &= v >= lo
    if hi is not None:
        mask &= v <= hi
    out = Tensor._wrap(np.clip(v, lo, hi))
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structure


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    widths = [t.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]
    out = Tensor._wrap(np.concatenate([t.values for t in tensors], axis=1))

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _record(out, tuple(tensors), vjp)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    heights = [t.shape[0] for t in tensors]
    splits = np.cumsum(heights)[:-1]
    out = Tensor._wrap(np.concatenate([t.values for t in tensors], axis=0))

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=0))

    return _record(out, tuple(tensors), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError("gather_rows index out of range")
    out = Tensor._wrap(x.values[idx])

    def vjp(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), vjp)


def row_update(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``rows`` written at ``idx``; other rows pass through.

    This is the carry-forward primitive: untouched rows keep their exact
    bits and their gradient path.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if rows.shape != (idx.size, base.shape[1]):
        raise ContractError("row_update shape mismatch")
    v = base.values.copy()
    v[idx] = rows.values
    out = Tensor._wrap(v)

    def vjp(g):
        g_base = g.copy()
        g_base[idx] = 0.0
        return (g_base, g[idx])

    return _record(out, (base, rows), vjp)


def segment_mean(x: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Mean of the rows of ``x`` grouped by segment id; empty segments are zero."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    if seg_ids.size != x.shape[0]:
        raise ContractError("segment_mean needs one segment id per row")
    counts = np.bincount(seg_ids, minlength=num_segments).astype(np.float64)
    sums = np.zeros((num_segments, x.shape[1]))
    np.add.at(sums, seg_ids, x.values)
    denom = np.maximum(counts, 1.0)[:, None]
    out = Tensor._wrap(sums / denom)

    def vjp(g):
        return ((g / denom)[seg_ids],)

    return _record(out, (x,), vjp)


def row_scale(x: Tensor, col) -> Tensor:
    """Scale each row by a constant per-row factor (column vector)."""
    col = np.asarray(col, dtype=np.float64).reshape(-1, 1)
    if col.shape[0] != x.shape[0]:
        raise ContractError("row_scale needs one factor per row")
    return _record(Tensor._wrap(x.values * col), (x,), lambda g: (g * col,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.array([[a.values.sum()]]))
    return _record(out, (a,), lambda g: (np.full_like(a.values, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor._wrap(np.array([[a.values.sum() / n]]))
    return _record(out, (a,), lambda g: (np.full_like(a.values, g[0, 0] / n),))


# ---------------------------------------------------------------------------
# stochastic


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _record(Tensor._wrap(x.values * scale), (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment estimates plus step counter for a parameter set."""

    def __init__(self, params: dict, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}


def adam_step(params: dict, state: AdamState, weight_decay: float = 0.0) -> None:
    """One Adam update with bias correction; L2 enters as weight_decay * param
    added to the gradient before the moment updates."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if weight_decay:
            g = g + weight_decay * p.values
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint format: sequence of
#   u32 name length, name UTF-8, u32 rows, u32 cols, rows*cols little-endian f64


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(arr.astype("<f8").tobytes())


def _read_records(fh) -> dict:
    out = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        (name_len,) = struct.unpack("<I", head)
        name = fh.read(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
        out[name] = data.reshape(rows, cols).copy()


def save_params(path, params: dict) -> None:
    with open(path, "wb") as fh:
        for name, p in params.items():
            _write_record(fh, name, p.values)


def load_params(path, params: dict) -> None:
    """Load values into an existing parameter dict (shapes must match)."""
    with open(path, "rb") as fh:
        stored = _read_records(fh)
    for name, p in params.items():
        if name not in stored:
            raise ContractError(f"checkpoint is missing parameter {name!r}")
        if stored[name].shape != p.values.shape:
            raise ContractError(f"checkpoint shape mismatch for {name!r}")
        p.values = stored[name]


def save_optimizer(path, state: AdamState) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", state.step))
        for name in state.m:
            _write_record(fh, name + ".m", state.m[name])
            _write_record(fh, name + ".v", state.v[name])


def load_optimizer(path, state: AdamState) -> None:
    with open(path, "rb") as fh:
        (state.step,) = struct.unpack("<Q", fh.read(8))
        stored = _read_records(fh)
    for name in state.m:
        state.m[name] = stored[name + ".m"]
        state.v[name] = stored[name + ".v"]


# ---------------------------------------------------------------------------
# finite differences (the oracle the gradient checks compare against)


def fd_gradient(loss_fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. an array,
    perturbing one entry at a time in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        hi = loss_fn()
        flat[k] = orig - h
        lo = loss_fn()
        flat[k] = orig
        gflat[k] = (hi - lo) / (2.0 * h)
    return grad


def gradcheck_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative error, with an absolute floor of 1 for tiny gradients."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
