"""Dense tensors, reverse-mode differentiation on a flat tape, and a
finite-difference oracle.

Tensors wrap a row-major numpy buffer (float32 or float64, selectable at
construction). Operations are module-level functions; while a GradTape is
active, every differentiable op appends one node to the tape, and
``backward`` replays the tape in exact reverse execution order, so gradient
accumulation order is fixed and runs are bitwise reproducible.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DivisibilityError(ShapeError):
    """A spatial dimension is not divisible by the required factor."""


class NumericError(ValueError):
    """Non-finite or out-of-domain values where finite ones are required."""


class ContractError(RuntimeError):
    """An API precondition (not a shape) was violated."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense N-dimensional array with optional gradient tracking.

    ``data`` is a numpy array (float32 or float64). ``requires_grad`` marks
    leaves whose gradients ``backward`` reports; it is propagated to op
    outputs automatically.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if any(s == 0 for s in arr.shape):
            raise ShapeError(f"zero-length axis in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        """The underlying buffer (a view, not a copy)."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions are the primary API.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("out", "pairs")

    def __init__(self, out, pairs):
        self.out = out
        self.pairs = pairs  # [(input Tensor, vjp callable), ...]


_ACTIVE_TAPE = None


class GradTape:
    """Ordered record of executed differentiable operations.

    Single-writer: one forward/backward pass at a time. ``backward`` fills
    the identity-keyed gradient map; ``grad`` reads it.
    """

    def __init__(self):
        self._nodes = []
        self._grads = {}  # id(tensor) -> accumulated gradient array

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("another GradTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def grad(self, t):
        """Accumulated gradient of ``t`` from the last backward, or None."""
        return self._grads.get(id(t))


def _record(out, pairs):
    """Register ``out = op(inputs)`` on the active tape.

    ``pairs`` holds (input, vjp) for every differentiable input; vjps of
    inputs that do not require grad are dropped.
    """
    out.requires_grad = any(t.requires_grad for t, _ in pairs)
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad:
        live = [(t, f) for t, f in pairs if t.requires_grad]
        tape._nodes.append(_Node(out, live))
    return out


def backward(loss, tape):
    """Gradients of a scalar ``loss`` w.r.t. every requires_grad leaf.

    Replays ``tape`` in exact reverse execution order; accumulation order is
    therefore fixed and deterministic. Returns {leaf Tensor: gradient array};
    gradients of intermediates stay queryable via ``tape.grad``.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise ContractError(
            f"backward needs a 0-dim loss tensor, got shape {getattr(loss, 'shape', None)}"
        )
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    produced = set()
    for node in tape._nodes:
        produced.add(id(node.out))
    if tape._nodes and id(loss) not in produced:
        raise ContractError("loss was not produced under this tape")
    leaves = {}
    for node in reversed(tape._nodes):
        g_out = grads.get(id(node.out))
        if g_out is None:
            continue
        for inp, vjp in node.pairs:
            g = vjp(g_out)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = inp
    tape._grads = grads
    return {t: grads[k] for k, t in leaves.items()}


# ---------------------------------------------------------------------------
# MAC counting (multiply-accumulate instrumentation for matmul-like ops)


class MacCounter:
    __slots__ = ("total",)

    def __init__(self):
        self.total = 0


_MACS = None


@contextmanager
def count_macs():
    """Count multiply-accumulates of matmul/linear ops executed inside."""
    global _MACS
    if _MACS is not None:
        raise ContractError("a MAC counter is already active")
    counter = MacCounter()
    _MACS = counter
    try:
        yield counter
    finally:
        _MACS = None


def _add_macs(n):
    if _MACS is not None:
        _MACS.total += int(n)


# ---------------------------------------------------------------------------
# Broadcasting helpers


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, vjp_a, vjp_b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    out = Tensor(fwd(a.data, b.data))
    ash, bsh = a.shape, b.shape
    return _record(
        out,
        [
            (a, lambda g, f=vjp_a: _unbroadcast(f(g), ash)),
            (b, lambda g, f=vjp_b: _unbroadcast(f(g), bsh)),
        ],
    )


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b):
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    ad, bd = a.data, b.data
    return _binary(a, b, np.multiply, lambda g: g * bd, lambda g: g * ad)


def div(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    ad, bd = a.data, b.data
    return _binary(a, b, np.divide, lambda g: g / bd, lambda g: -g * ad / (bd * bd))


def neg(a):
    out = Tensor(-a.data)
    return _record(out, [(a, lambda g: -g)])


def relu(a):
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, a.dtype.type(0)))
    return _record(out, [(a, lambda g: g * mask)])


def sigmoid(a):
    x = a.data
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    out = Tensor(s)
    return _record(out, [(a, lambda g: g * s * (1.0 - s))])


def softplus(a):
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _record(out, [(a, lambda g: g * s)])


def exp(a):
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, [(a, lambda g: g * e)])


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    x = a.data
    out = Tensor(np.log(x))
    return _record(out, [(a, lambda g: g / x)])


def sqrt(a):
    if np.any(a.data < 0):
        raise NumericError("sqrt: negative input")
    r = np.sqrt(a.data)
    out = Tensor(r)
    return _record(out, [(a, lambda g: g * 0.5 / r)])


def absolute(a):
    x = a.data
    out = Tensor(np.abs(x))
    sign = np.sign(x)  # subgradient 0 at the kink
    return _record(out, [(a, lambda g: g * sign)])


def maximum(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    ad, bd = a.data, b.data
    wa = (ad > bd) + 0.5 * (ad == bd)
    return _binary(a, b, np.maximum, lambda g: g * wa, lambda g: g * (1.0 - wa))


def minimum(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)
    ad, bd = a.data, b.data
    wa = (ad < bd) + 0.5 * (ad == bd)
    return _binary(a, b, np.minimum, lambda g: g * wa, lambda g: g * (1.0 - wa))


# ---------------------------------------------------------------------------
# Reductions


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g, dtype=g.dtype)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape).copy()

    return _record(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= shape[ax % len(shape)]

    def vjp(g):
        if axis is None:
            return np.full(shape, g / count, dtype=g.dtype)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape) / count).astype(g.dtype, copy=False)

    return _record(out, [(a, vjp)])


def softmax(x, axis):
    """exp(x - max) / sum along ``axis``; each slice sums to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    """Batched matrix product over the trailing two axes.

    Leading axes broadcast. Differentiable in both operands.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _add_macs(math.prod(batch) * m * k * n)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ash)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bsh)

    return _record(out, [(a, vjp_a), (b, vjp_b)])


def linear(x, w, bias=None):
    """Per-position map x @ w over the last axis (no bias unless given)."""
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {w.shape}")
    c_in, c_out = w.shape
    x2 = x.data.reshape(-1, c_in)
    y = x2 @ w.data
    _add_macs(x2.shape[0] * c_in * c_out)
    if bias is not None:
        y = y + bias.data
    out_shape = x.shape[:-1] + (c_out,)
    out = Tensor(y.reshape(out_shape))

    def vjp_x(g):
        return (g.reshape(-1, c_out) @ w.data.T).reshape(x.shape)

    def vjp_w(g):
        return x2.T @ g.reshape(-1, c_out)

    pairs = [(x, vjp_x), (w, vjp_w)]
    if bias is not None:
        pairs.append((bias, lambda g: g.reshape(-1, c_out).sum(axis=0)))
    return _record(out, pairs)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _record(out, [(x, lambda g: g.reshape(orig))])


def transpose(x, axes):
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _record(out, [(x, lambda g: g.transpose(inv))])


def concat(tensors, axis):
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        pairs.append((t, vjp))
    return _record(out, pairs)


def index_last(x, i):
    """x[..., i] (one coordinate of the last axis)."""
    if not 0 <= i < x.shape[-1]:
        raise ShapeError(f"index {i} out of range for last axis of {x.shape}")
    out = Tensor(x.data[..., i].copy())
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[..., i] = g
        return z

    return _record(out, [(x, vjp)])


def pad2d(x, pad_h, pad_w):
    """Zero-pad axes 1 and 2 of a [B, H, W, C] tensor (bottom/right)."""
    if x.ndim != 4:
        raise ShapeError(f"pad2d needs [B,H,W,C], got {x.shape}")
    out = Tensor(np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0))))
    h, w = x.shape[1], x.shape[2]
    return _record(out, [(x, lambda g: g[:, :h, :w, :])])


def crop2d(x, h, w):
    """Keep the top-left h x w region of axes 1 and 2."""
    if x.ndim != 4 or h > x.shape[1] or w > x.shape[2]:
        raise ShapeError(f"crop2d to ({h},{w}) invalid for {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data[:, :h, :w, :]))
    ph, pw = x.shape[1] - h, x.shape[2] - w

    def vjp(g):
        return np.pad(g, ((0, 0), (0, ph), (0, pw), (0, 0)))

    return _record(out, [(x, vjp)])


def extract_patches(x, kh, kw, stride, pad):
    """im2col: [B,H,W,C] -> [B,H',W',kh*kw*C] of flattened patches.

    Patch layout is (tap row, tap col, channel) row-major. H' uses floor
    semantics: (H + 2*pad - kh)//stride + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"extract_patches needs [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    out_arr = np.empty((b, ho, wo, kh * kw * c), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            tap = xp[:, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride, :]
            out_arr[:, :, :, (u * kw + v) * c : (u * kw + v + 1) * c] = tap
    out = Tensor(out_arr)

    def vjp(g):
        gp = np.zeros((b, hp, wp, c), dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gp[:, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride, :] += g[
                    :, :, :, (u * kw + v) * c : (u * kw + v + 1) * c
                ]
        return gp[:, pad : pad + h, pad : pad + w, :] if pad else gp

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# Spatial resampling


def upsample_nearest(x, fh, fw):
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest needs [B,H,W,C], got {x.shape}")
    out = Tensor(x.data.repeat(fh, axis=1).repeat(fw, axis=2))
    b, h, w, c = x.shape

    def vjp(g):
        return g.reshape(b, h, fh, w, fw, c).sum(axis=(2, 4))

    return _record(out, [(x, vjp)])


def avgpool(x, fh, fw):
    if x.ndim != 4:
        raise ShapeError(f"avgpool needs [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    if h % fh or w % fw:
        raise DivisibilityError(f"avgpool factor ({fh},{fw}) does not divide ({h},{w})")
    out = Tensor(x.data.reshape(b, h // fh, fh, w // fw, fw, c).mean(axis=(2, 4)))
    inv = 1.0 / (fh * fw)

    def vjp(g):
        expanded = np.broadcast_to(
            g[:, :, None, :, None, :] * inv, (b, h // fh, fh, w // fw, fw, c)
        )
        return np.ascontiguousarray(expanded).reshape(b, h, w, c)

    return _record(out, [(x, vjp)])


def resample(x, target_hw):
    """Nearest-neighbor upsample / average-pool downsample to (H', W').

    Each axis ratio must be an integer or the reciprocal of one; mixed
    up/down across axes is allowed.
    """
    if x.ndim != 4:
        raise ShapeError(f"resample needs [B,H,W,C], got {x.shape}")
    th, tw = target_hw
    h, w = x.shape[1], x.shape[2]

    def factors(src, dst, name):
        if dst >= src:
            if dst % src:
                raise ShapeError(f"unsupported resample ratio {dst}/{src} on {name}")
            return dst // src, 1
        if src % dst:
            raise ShapeError(f"unsupported resample ratio {dst}/{src} on {name}")
        return 1, src // dst

    up_h, down_h = factors(h, th, "H")
    up_w, down_w = factors(w, tw, "W")
    out = x
    if up_h > 1 or up_w > 1:
        out = upsample_nearest(out, up_h, up_w)
    if down_h > 1 or down_w > 1:
        out = avgpool(out, down_h, down_w)
    return out


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar Tensor and must be evaluable repeatedly.
    Requires float64; relative error is |analytic - numeric| / max(1, |numeric|),
    maximized over coordinates of ``x``.
    """
    if x.dtype != np.float64:
        raise ContractError("finite_diff_check requires a float64 tensor")
    if not x.requires_grad:
        raise ContractError("finite_diff_check input must have requires_grad=True")
    with GradTape() as tape:
        y = f(x)
    if y.shape != ():
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
    backward(y, tape)
    analytic = tape.grad(x)
    if analytic is None:
        analytic = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    max_err = 0.0
    for i in range(flat.size):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
        if err > max_err:
            max_err = err
    return max_err
