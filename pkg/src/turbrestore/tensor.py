"""Reverse-mode automatic differentiation over dense numpy arrays.

The op set is exactly what the restoration model needs: matmul, conv2d,
softmax, gelu, layer_norm, elementwise arithmetic, shape manipulation and
concatenation. Nothing is lazy: every op computes eagerly, records its
parents, and attaches a closure that pushes the output gradient back to
them. ``backward`` on a scalar loss walks the graph once in reverse
topological order.

Two dtypes are supported. float64 exists for finite-difference gradient
checks (meaningless at single precision); training runs float32. Binary
ops refuse mixed dtypes so the two modes cannot blend silently.

Every op validates that its output is finite and raises NonFiniteError
otherwise, so NaN/Inf never propagate silently. Broadcasting is limited
to numpy's trailing-alignment rule with size-1 axes; anything else is a
ShapeError.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "softmax",
    "gelu",
    "layer_norm",
    "transpose",
    "reshape",
    "broadcast_to",
    "mean",
    "absolute",
    "concat",
    "backward",
    "topo_order",
]

_ALLOWED_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense array with optional gradient tracking.

    ``data`` is a numpy array (float32 or float64). ``grad`` holds the
    accumulated gradient after backward(); repeated backward calls keep
    accumulating until the grad is reset. Tensors are immutable after
    construction except for grad accumulation and the guarded
    ``apply_update`` used by optimizers.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """A leaf view of the same data with gradient tracking cut."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}," \
               f" requires_grad={self.requires_grad}{tag})"

    # -- parameter update (the one sanctioned mutation) -------------------

    def apply_update(self, delta):
        """In-place parameter update, rejected on frozen tensors."""
        if self.frozen:
            from .errors import ContractViolationError

            raise ContractViolationError(
                f"gradient application to frozen parameter {self.name or '<unnamed>'}"
            )
        delta = np.asarray(delta, dtype=self.data.dtype)
        if delta.shape != self.data.shape:
            raise ShapeError(
                f"update shape {delta.shape} does not match parameter shape {self.data.shape}"
            )
        new = self.data + delta
        _check_finite(new, "parameter update")
        self.data = new

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(op, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _make(data, parents, backward_fn, op):
    """Assemble an op output, wiring the graph only when grads are needed."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.frozen = False
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


# -- broadcasting ----------------------------------------------------------


def _broadcastable(a_shape, b_shape):
    for x, y in zip(reversed(a_shape), reversed(b_shape)):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _unbroadcast(g, shape):
    """Sum a gradient back down to ``shape`` (adjoint of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_dtype("add", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not broadcastable")
    data = a.data + b.data

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), _bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_dtype("sub", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are not broadcastable")
    data = a.data - b.data

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), _bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_dtype("mul", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable")
    data = a.data * b.data

    def _bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), _bw, "mul")


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.data.dtype)

    def _bw(g):
        _accum(a, g * np.asarray(s, dtype=a.data.dtype))

    return _make(data, (a,), _bw, "scale")


def absolute(a):
    a = _as_tensor(a)
    data = np.abs(a.data)

    def _bw(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), _bw, "absolute")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(data, (a, b), _bw, "matmul")


# -- conv2d ------------------------------------------------------------------


def _corr2d(x, w, stride, pad):
    """Plain-numpy cross-correlation of [C,H,W] with [O,C,k,k]; returns
    ([O,Ho,Wo], cols) with cols kept for the backward pass."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    out = cols @ w.reshape(o, -1).T
    return out.T.reshape(o, ho, wo), cols


@lru_cache(maxsize=None)
def _col2im_index(cin, h, w, k, stride, pad):
    """Flat scatter indices mapping im2col columns back into the padded input."""
    hp, wp = h + 2 * pad, w + 2 * pad
    oy = np.arange(0, hp - k + 1, stride)
    ox = np.arange(0, wp - k + 1, stride)
    # index[p_y, p_x, c, i, j] into flat [cin*hp*wp]
    cc = np.arange(cin)[None, None, :, None, None] * (hp * wp)
    yy = (oy[:, None, None, None, None] + np.arange(k)[None, None, None, :, None]) * wp
    xx = ox[None, :, None, None, None] + np.arange(k)[None, None, None, None, :]
    idx = cc + yy + xx
    return idx.ravel(), hp, wp


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation of x[C_in,H,W] with w[C_out,C_in,k,k].

    Odd square kernels only; stride-1 pad-(k-1)/2 preserves spatial size.
    Gradients are defined for x, w and bias.
    """
    x, w = _as_tensor(x), _as_tensor(w, like=x)
    _check_same_dtype("conv2d", x, w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects x[C,H,W], w[O,C,k,k], got {x.shape}, {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    if x.shape[0] != cin:
        raise ShapeError(
            f"conv2d: channel mismatch: input has {x.shape[0]} channels, kernel expects {cin}"
        )
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        _check_same_dtype("conv2d", x, bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    data, cols = _corr2d(x.data, w.data, stride, pad)
    if bias is not None:
        data = data + bias.data[:, None, None]

    c, h, wd = x.shape
    k = kh

    def _bw(g):
        o, ho, wo = g.shape
        gmat = g.reshape(o, ho * wo).T
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            if k == 1 and stride == 1 and pad == 0:
                dx = (gmat @ w.data.reshape(o, -1)).T.reshape(c, h, wd)
            elif stride == 1:
                # correlate the output grad with spatially flipped, in/out
                # swapped kernels; equivalent to the col2im scatter.
                wswap = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                dx, _ = _corr2d(g, np.ascontiguousarray(wswap), 1, k - 1 - pad)
            else:
                dcols = gmat @ w.data.reshape(o, -1)
                idx, hp, wp = _col2im_index(c, h, wd, k, stride, pad)
                flat = np.bincount(idx, weights=dcols.ravel().astype(np.float64),
                                   minlength=c * hp * wp)
                dx = flat.reshape(c, hp, wp).astype(x.data.dtype)
                if pad:
                    dx = dx[:, pad:-pad, pad:-pad]
            _accum(x, dx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, _bw, "conv2d")


# -- nonlinearities ------------------------------------------------------------


def softmax(x, axis):
    """Numerically stabilized softmax along ``axis``; slices sum to 1."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), _bw, "softmax")


def gelu(x):
    """Exact (erf-based) gaussian error linear unit."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def _bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (phi + x.data * pdf))

    return _make(data.astype(x.data.dtype, copy=False), (x,), _bw, "gelu")


def layer_norm(x, axis, gain=None, bias=None, eps=1e-5):
    """Normalize to zero mean / unit variance along one axis, then an
    optional per-slot affine. gain/bias are 1-D of length x.shape[axis]."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"layer_norm: axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    bshape = [1] * x.ndim
    bshape[axis] = n
    parents = [x]
    for p, label in ((gain, "gain"), (bias, "bias")):
        if p is not None:
            if p.shape != (n,):
                raise ShapeError(f"layer_norm: {label} shape {p.shape} != ({n},)")
            parents.append(p)
    _check_same_dtype("layer_norm", *parents)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    data = xhat
    if gain is not None:
        data = data * gain.data.reshape(bshape)
    if bias is not None:
        data = data + bias.data.reshape(bshape)

    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def _bw(g):
        gh = g
        if gain is not None:
            gh = g * gain.data.reshape(bshape)
            if gain.requires_grad:
                _accum(gain, (g * xhat).sum(axis=reduce_axes))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=reduce_axes))
        if x.requires_grad:
            m1 = gh.mean(axis=axis, keepdims=True)
            m2 = (gh * xhat).mean(axis=axis, keepdims=True)
            _accum(x, inv * (gh - m1 - xhat * m2))

    return _make(data, tuple(parents), _bw, "layer_norm")


# -- shape ops -------------------------------------------------------------------


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        _accum(a, g.transpose(inverse))

    return _make(data, (a,), _bw, "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def _bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), _bw, "reshape")


def broadcast_to(a, shape):
    a = _as_tensor(a)
    if not _broadcastable(a.shape, shape) or len(shape) < a.ndim:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _make(data, (a,), _bw, "broadcast_to")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes if a.ndim else None, keepdims=keepdims)

    def _bw(g):
        gg = g
        if not keepdims and a.ndim:
            gg = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(data, (a,), _bw, "mean")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    _check_same_dtype("concat", *tensors)
    ndim = tensors[0].ndim
    axis = axis % max(ndim, 1)
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for i in range(ndim):
            if i != axis and t.shape[i] != tensors[0].shape[i]:
                raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off-axis")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), _bw, "concat")


# -- backward ---------------------------------------------------------------------


def topo_order(root):
    """Reverse-topological op graph: parents always precede their consumers.

    Each reachable node appears exactly once; the graph is acyclic by
    construction (ops only reference already-built tensors).
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    The loss must be scalar. Calling backward again without resetting
    grads accumulates into them.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    seed = np.ones((), dtype=loss.data.dtype)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
