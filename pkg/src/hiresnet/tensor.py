"""Minimal N-d tensor with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy buffers (float32 for training,
float64 for gradient checking). Differentiable ops record nodes on an
explicit Tape; a node's parents always precede it, so backward is a single
reverse sweep over the append order. A tape and its live tensors belong to
one logical thread; detached tensors are plain immutable data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

# debug switch: verify every forward op keeps finite values
CHECK_FINITE = False


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


_TAPES: list["Tape"] = []  # innermost active tape last


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents      # tuple of parent node indices (None = constant input)
        self.backward = backward    # fn(upstream) -> per-parent grads; None for leaves


class Tape:
    """Append-only record of differentiable ops.

    Invariant: every parent of node i has index < i, so one reverse pass over
    the append order visits each node exactly once. A tape that has run
    backward() must be reset() before recording again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, "Tensor"] = {}
        self._consumed = False
        self.generation = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def _push(self, node):
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self):
        self.nodes.clear()
        self.leaves.clear()
        self._consumed = False
        self.generation += 1


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Dense N-d array with an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "_gen")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = None
        self._gen = -1

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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor_from(shape, values, dtype=None, requires_grad=False):
    """Build a tensor of `shape` from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    arr = np.asarray(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE).reshape(-1)
    if arr.size != math.prod(shape):
        raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
    return Tensor(arr.reshape(shape), requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# recording machinery


def _register_leaf(t, tape):
    idx = tape._push(_Node((), None))
    tape.leaves[idx] = t
    t._tape = tape
    t._node = idx
    t._gen = tape.generation
    return idx


def _record(out_data, inputs, backward):
    if CHECK_FINITE and np.issubdtype(out_data.dtype, np.floating):
        if not np.all(np.isfinite(out_data)):
            raise FloatingPointError("non-finite value produced by forward op")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    parent_idx = []
    tracked = False
    for t in inputs:
        if isinstance(t, Tensor):
            if t._tape is tape and t._gen == tape.generation and t._node is not None:
                parent_idx.append(t._node)
                tracked = True
                continue
            if t.requires_grad:
                parent_idx.append(_register_leaf(t, tape))
                tracked = True
                continue
        parent_idx.append(None)
    if not tracked:
        return out
    out._tape = tape
    out._node = tape._push(_Node(tuple(parent_idx), backward))
    out._gen = tape.generation
    return out


def backward(loss):
    """Reverse accumulation from a scalar loss; fills .grad on leaf tensors."""
    if not isinstance(loss, Tensor) or loss._node is None or loss._tape is None:
        raise TapeError("loss is not attached to a tape")
    if loss.data.size != 1:
        raise ShapeError("backward() requires a scalar loss")
    tape = loss._tape
    if tape._consumed:
        raise TapeError("tape already consumed by backward(); call reset() first")
    tape._consumed = True
    grads = [None] * len(tape.nodes)
    grads[loss._node] = np.ones_like(loss.data)
    for i in range(len(tape.nodes) - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.backward is None:
            continue  # leaf
        for pi, pg in zip(node.parents, node.backward(g)):
            if pi is None or pg is None:
                continue
            grads[pi] = pg if grads[pi] is None else grads[pi] + pg
        grads[i] = None
    for idx, leaf in tape.leaves.items():
        g = grads[idx]
        if g is not None:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    b = _coerce(b, a)
    _check_broadcast(a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    b = _coerce(b, a)
    _check_broadcast(a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    b = _coerce(b, a)
    _check_broadcast(a.data, b.data)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), bwd)


def div(a, b):
    b = _coerce(b, a)
    _check_broadcast(a.data, b.data)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def pow_scalar(a, p):
    p = float(p)
    out = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (a,), bwd)


def log(a):
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# activations (exact analytic gradients; GELU uses the tanh form)

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(a):
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), bwd)


def _sigmoid_np(x):
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid_np(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), bwd)


def silu(a):
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bwd(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _record(out, (a,), bwd)


def gelu(a):
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims),)

    return _record(np.asarray(out, dtype=a.data.dtype), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.data.shape[ax % a.data.ndim] for ax in axes)

    def bwd(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / count,)

    return _record(np.asarray(out, dtype=a.data.dtype), (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family (max-subtraction stabilized)


def softmax(a, axis):
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax(a, axis):
    m = np.max(a.data, axis=axis, keepdims=True)
    s = a.data - m
    out = s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    b = _coerce(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires tensors of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"inner dims differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# layout ops (pass-through gradients, bit-exact round trips)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = -math.prod(shape)  # product of the fixed extents
        if known <= 0 or a.data.size % known:
            raise ShapeError(f"cannot reshape {a.data.shape} to {shape}")
        shape = tuple(a.data.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}")
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(np.ascontiguousarray(out), (a,), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ref} vs {s}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def slice_axis(a, axis, start, stop):
    axis = axis % a.data.ndim
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.data.ndim))
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# convolution (patch extraction + one einsum contraction)


@dataclass(frozen=True)
class ConvSpec:
    """Grouped 2-d cross-correlation with zero padding.

    groups == in_channels == out_channels selects depth-wise convolution.
    """

    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1


def conv2d(x, weight, bias, spec):
    n, c, h, w = x.data.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    groups = spec.groups
    oc = spec.out_channels
    if c % groups or oc % groups:
        raise ShapeError(f"channels {c}->{oc} not divisible by groups {groups}")
    if weight.data.shape != (oc, c // groups, kh, kw):
        raise ShapeError(f"weight shape {weight.data.shape} != {(oc, c // groups, kh, kw)}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph},{pw}")
    # floor semantics: trailing rows/cols that do not fill a window are dropped
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :ho, :wo]            # [N, C, Ho, Wo, kh, kw]
    cg = c // groups
    og = oc // groups
    wing = win.reshape(n, groups, cg, ho, wo, kh, kw)
    wg = weight.data.reshape(groups, og, cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", wing, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(n, oc, ho, wo))
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)

    def bwd(g):
        gg = g.reshape(n, groups, og, ho, wo)
        grad_w = np.einsum("ngohw,ngchwij->gocij", gg, wing, optimize=True)
        grad_w = grad_w.reshape(oc, cg, kh, kw)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grad_win = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True)
        grad_win = grad_win.reshape(n, c, ho, wo, kh, kw)
        gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += grad_win[:, :, :, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if bias is not None:
            return gx, grad_w, grad_b
        return gx, grad_w

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# batch normalization (per channel over N,H,W; differentiable through stats)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """running_mean / running_var are plain buffers, updated in place in training mode."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        rm *= 1.0 - momentum
        rm += momentum * mu
        rv *= 1.0 - momentum
        rv += momentum * var
    else:
        mu, var = rm, rv

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        g_gamma = np.sum(g * xhat, axis=(0, 2, 3))
        g_beta = np.sum(g, axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            m = n * h * w
            s1 = np.sum(dxhat, axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = np.sum(dxhat * xhat, axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(1, c, 1, 1)
        return gx, g_gamma, g_beta

    return _record(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# resampling / pooling


def _bilinear_indices(out_len, in_len, scale):
    # half-pixel (align_corners=False) source coordinates
    src = (np.arange(out_len) + 0.5) / scale - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    lo_c = np.clip(lo, 0, in_len - 1)
    hi_c = np.clip(lo + 1, 0, in_len - 1)
    return lo_c, hi_c, frac


def bilinear_upsample(x, scale):
    scale = int(scale)
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return _record(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.data.shape
    oh, ow = h * scale, w * scale
    y0, y1, fy = _bilinear_indices(oh, h, scale)
    x0, x1, fx = _bilinear_indices(ow, w, scale)
    fy = fy.reshape(-1, 1).astype(x.data.dtype)
    fx = fx.reshape(1, -1).astype(x.data.dtype)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    d = x.data
    out = (w00 * d[:, :, y0[:, None], x0[None, :]]
           + w01 * d[:, :, y0[:, None], x1[None, :]]
           + w10 * d[:, :, y1[:, None], x0[None, :]]
           + w11 * d[:, :, y1[:, None], x1[None, :]])

    def bwd(g):
        gx = np.zeros_like(x.data)
        for wgt, yi, xi in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
            np.add.at(gx, (slice(None), slice(None), yi[:, None], xi[None, :]), g * wgt)
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), bwd)


def global_avg_pool(x):
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape),)

    return _record(out, (x,), bwd)
