"""Dense-tensor reverse-mode autodiff substrate.

Small on purpose: numpy holds the data, a linear tape holds the program.
Every primitive defined here computes an exact vector-Jacobian product in
its backward closure and is covered by `gradient_check`.

Precision is a process-wide switch: float32 for training speed, float64
when verifying gradients or DP identities (see `set_precision`). In
verification mode every primitive asserts its output is finite.

Broadcasting is deliberately restricted: binary ops accept equal shapes,
a scalar right operand, or a trailing-axis vector (bias add). Anything
else is a shape error, not a silent expansion.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "Tape",
    "recording",
    "set_precision",
    "get_precision",
    "set_verification",
    "verification_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "swap_last_axes",
    "index",
    "take",
    "pick_last_axis",
    "cumsum_last_axis",
    "tsum",
    "mean",
    "lstm_cell",
    "softmax",
    "log_softmax_last_axis",
    "logsumexp",
    "layer_norm",
    "dropout",
    "gradient_check",
]

# Large finite value used to mask attention logits; -inf would trip the
# finite-output verification and poison max-shift arithmetic.
MASK_VALUE = -1e9


class NumericsError(Exception):
    """Shape, domain, or verification failure inside the tensor core."""


# ---------------------------------------------------------------------------
# global configuration
# ---------------------------------------------------------------------------

_DTYPE = np.float32
_VERIFY = False
_TAPE: "Tape | None" = None


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for all tensors created afterwards."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise NumericsError(f"unsupported precision: {bits}")


def get_precision() -> int:
    return 64 if _DTYPE == np.float64 else 32


def set_verification(enabled: bool) -> None:
    """Toggle finite-output checks after every primitive."""
    global _VERIFY
    _VERIFY = bool(enabled)


def verification_enabled() -> bool:
    return _VERIFY


@contextmanager
def precision(bits: int, verify: bool | None = None):
    """Temporarily switch precision (and optionally verification)."""
    old_bits, old_verify = get_precision(), _VERIFY
    set_precision(bits)
    if verify is not None:
        set_verification(verify)
    try:
        yield
    finally:
        set_precision(old_bits)
        set_verification(old_verify)


# ---------------------------------------------------------------------------
# tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense array plus (optionally) a gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the free functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


class Tape:
    """Ordered record of primitive applications; replayed in reverse.

    Append order is execution order, hence a valid topological order.
    `backward` clears each intermediate gradient after propagating it, so
    backward passes for several losses recorded on one tape accumulate
    into the leaves (gradient linearity) without double counting.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise NumericsError("backward requires a scalar loss")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, bwd in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            bwd(g)
            out.grad = None  # intermediate; consumed exactly once


@contextmanager
def recording():
    """Record primitives applied in this block onto a fresh tape."""
    global _TAPE
    if _TAPE is not None:
        raise NumericsError("tapes do not nest")
    tape = Tape()
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = None


def _emit(out: Tensor, bwd: Callable[[np.ndarray], None]) -> Tensor:
    if _VERIFY and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite value produced by primitive")
    if _TAPE is not None and out.requires_grad:
        _TAPE.records.append((out, bwd))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _grad_buffer(t: Tensor) -> np.ndarray:
    """Zero-initialized gradient storage for in-place scatter accumulation."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


# ---------------------------------------------------------------------------
# binary elementwise ops (restricted broadcasting)
# ---------------------------------------------------------------------------


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise NumericsError(f"incompatible shapes for elementwise op: {a.shape} vs {b.shape}")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # Undo the scalar / trailing-vector broadcast allowed above.
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary_shapes(a, b)
    out = Tensor(a.data + b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def bwd(g):
        _accum(a, g)
        _accum(b, _reduce_to(b.shape, g))

    return _emit(out, bwd)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary_shapes(a, b)
    out = Tensor(a.data - b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def bwd(g):
        _accum(a, g)
        _accum(b, -_reduce_to(b.shape, g))

    return _emit(out, bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary_shapes(a, b)
    out = Tensor(a.data * b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, _reduce_to(b.shape, g * a.data))

    return _emit(out, bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, -g)

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (..., m, k) @ (k, n) or (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise NumericsError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    out.requires_grad = a.requires_grad or b.requires_grad

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            _accum(b, gb)

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g * (1.0 - t * t))

    return _emit(out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    return _emit(out, bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _emit(out, bwd)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g * e)

    return _emit(out, bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = Tensor(np.log(a.data))
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g / a.data)

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise NumericsError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    out.requires_grad = any(p.requires_grad for p in parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if not p.requires_grad:
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            piece = g[tuple(sl)]
            if p.grad is None:
                p.grad = piece.astype(p.data.dtype, copy=True)
            else:
                p.grad += piece

    return _emit(out, bwd)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _emit(out, bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    out.requires_grad = a.requires_grad
    inverse = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inverse))

    return _emit(out, bwd)


def swap_last_axes(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def index(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back in place."""
    out = Tensor(a.data[idx].copy())
    out.requires_grad = a.requires_grad

    def bwd(g):
        if a.requires_grad:
            _grad_buffer(a)[idx] += g

    return _emit(out, bwd)


def take(a: Tensor, ids) -> Tensor:
    """Gather rows of `a` along axis 0 by an integer array (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(a.data[ids])
    out.requires_grad = a.requires_grad

    def bwd(g):
        if a.requires_grad:
            np.add.at(_grad_buffer(a), ids, g)

    return _emit(out, bwd)


def pick_last_axis(a: Tensor, ids) -> Tensor:
    """out[...] = a[..., ids[...]] with ids shaped like a's leading axes."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise NumericsError(f"pick index shape {ids.shape} != leading shape {a.shape[:-1]}")
    picked = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]
    out = Tensor(picked)
    out.requires_grad = a.requires_grad
    width = a.shape[-1]

    def bwd(g):
        if not a.requires_grad:
            return
        flat = _grad_buffer(a).reshape(-1, width)
        # Each (row, id) pair is unique, so fancy-indexed += is exact.
        flat[np.arange(flat.shape[0]), ids.ravel()] += g.ravel()

    return _emit(out, bwd)


def cumsum_last_axis(a: Tensor) -> Tensor:
    out = Tensor(np.cumsum(a.data, axis=-1))
    out.requires_grad = a.requires_grad

    def bwd(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
        _accum(a, rev)

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))
    out.requires_grad = a.requires_grad

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _emit(out, bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    out.requires_grad = a.requires_grad

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - dot))

    return _emit(out, bwd)


def log_softmax_last_axis(a: Tensor) -> Tensor:
    """Shift-invariant log-softmax along the last axis."""
    if a.shape[-1] < 1:
        raise NumericsError("empty reduction")
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)
    out.requires_grad = a.requires_grad

    def bwd(g):
        soft = np.exp(out_data)
        _accum(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _emit(out, bwd)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along `axis`, max-shifted; tolerates -inf entries."""
    if a.shape == () or a.shape[axis] == 0:
        raise NumericsError("empty reduction")
    m = a.data.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = m_safe + np.log(np.exp(a.data - m_safe).sum(axis=axis, keepdims=True))
    out_data = np.squeeze(out_k, axis=axis)
    out = Tensor(out_data)
    out.requires_grad = a.requires_grad

    def bwd(g):
        safe = np.where(np.isfinite(out_k), out_k, 0.0)
        with np.errstate(invalid="ignore"):
            w = np.exp(a.data - safe)
        w = np.where(np.isfinite(a.data), w, 0.0)
        _accum(a, np.expand_dims(g, axis) * w)

    # -inf output is legitimate (all-masked lane); bypass the finite check.
    if _TAPE is not None and out.requires_grad:
        _TAPE.records.append((out, bwd))
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise NumericsError("layer_norm affine params must match last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    out.requires_grad = a.requires_grad or gain.requires_grad or bias.requires_grad

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * term)

    return _emit(out, bwd)


def lstm_cell(
    xz: Tensor, h: Tensor, c: Tensor, w_h: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """Fused LSTM update from a precomputed input projection.

    `xz` is the input's gate projection (B, 4d) with gate order
    [input, forget, cell, output]; `h`, `c` are (B, d); `w_h` is (d, 4d).
    Returns (h', c') as two recorded outputs sharing one backward: the
    cell output's gradient is buffered until the hidden output's record
    fires. Callers must consume h' whenever they consume c' (every
    recurrence does), or the cell-path gradient would be dropped.
    """
    d = w_h.shape[0]
    if xz.shape[-1] != 4 * d or h.shape[-1] != d or c.shape[-1] != d or b.shape != (4 * d,):
        raise NumericsError(
            f"lstm_cell shape mismatch: xz {xz.shape}, h {h.shape}, c {c.shape}, "
            f"w_h {w_h.shape}, b {b.shape}"
        )
    z = xz.data + h.data @ w_h.data + b.data
    i = 1.0 / (1.0 + np.exp(-z[..., 0 * d : 1 * d]))
    f = 1.0 / (1.0 + np.exp(-z[..., 1 * d : 2 * d]))
    g = np.tanh(z[..., 2 * d : 3 * d])
    o = 1.0 / (1.0 + np.exp(-z[..., 3 * d : 4 * d]))
    c_new = f * c.data + i * g
    tau = np.tanh(c_new)
    out_h = Tensor(o * tau)
    out_c = Tensor(c_new)
    needs = any(t.requires_grad for t in (xz, h, c, w_h, b))
    out_h.requires_grad = needs
    out_c.requires_grad = needs
    if _VERIFY and not (np.all(np.isfinite(out_h.data)) and np.all(np.isfinite(out_c.data))):
        raise NumericsError("non-finite value produced by primitive")
    if _TAPE is None or not needs:
        return out_h, out_c

    buffered_dc: list[np.ndarray | None] = [None]

    def bwd_c(gc):
        buffered_dc[0] = gc

    def bwd_h(gh):
        dc_total = gh * o * (1.0 - tau * tau)
        if buffered_dc[0] is not None:
            dc_total = dc_total + buffered_dc[0]
            buffered_dc[0] = None
        dzi = dc_total * g * i * (1.0 - i)
        dzf = dc_total * c.data * f * (1.0 - f)
        dzg = dc_total * i * (1.0 - g * g)
        dzo = gh * tau * o * (1.0 - o)
        dz = np.concatenate([dzi, dzf, dzg, dzo], axis=-1)
        _accum(xz, dz)
        _accum(h, dz @ w_h.data.T)
        _accum(c, dc_total * f)
        if w_h.requires_grad:
            _accum(w_h, h.data.reshape(-1, d).T @ dz.reshape(-1, 4 * d))
        if b.requires_grad:
            _accum(b, dz.reshape(-1, 4 * d).sum(axis=0))

    # Reverse traversal visits the later record first, so the cell
    # output's buffer-only record must sit after the hidden record.
    _TAPE.records.append((out_h, bwd_h))
    _TAPE.records.append((out_c, bwd_c))
    return out_h, out_c


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. `rate` is the drop probability; eval mode is identity."""
    if not train or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise NumericsError(f"dropout rate out of range: {rate}")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(a.data.dtype) / keep
    out = Tensor(a.data * mask)
    out.requires_grad = a.requires_grad

    def bwd(g):
        _accum(a, g * mask)

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def gradient_check(
    f: Callable[[], Tensor],
    points: Tensor | Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of f against central differences.

    `f` must rebuild its computation from scratch on every call and return
    a scalar. Returns the max of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
    over every coordinate of every point.
    """
    if get_precision() != 64:
        raise NumericsError("gradient_check requires 64-bit precision")
    if not 1e-6 <= step <= 1e-4:
        raise NumericsError(f"step {step} outside [1e-6, 1e-4]")
    pts = [points] if isinstance(points, Tensor) else list(points)
    for p in pts:
        p.zero_grad()

    with recording() as tape:
        out = f()
        if out.data.ndim != 0:
            raise NumericsError("gradient_check requires a scalar-valued function")
        tape.backward(out)

    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in pts]

    worst = 0.0
    for p, g_ad in zip(pts, analytic):
        flat = p.data.flat
        ga_flat = g_ad.reshape(-1)
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * step)
            ga = float(ga_flat[i])
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
        p.zero_grad()
    return worst


def global_grad_norm(params: Iterable[Tensor]) -> float:
    """L2 norm over all parameter gradients (missing grads count as zero)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    return math.sqrt(total)
