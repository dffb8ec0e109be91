"""Dense tensors with tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array (float32 or float64).
Gradients are recorded define-by-run: while a ``Tape`` is active, every op
that touches an attached tensor appends a node with a backward closure.
``backward(loss)`` walks the node list in reverse, accumulating gradients
into the watched leaves. Tapes are rebuilt per forward pass and are confined
to a single thread.

Image tensors use the B x C x H x W layout throughout.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import DetachedTensor, NonFiniteValue, NotScalar, ShapeMismatch

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _contig(arr: np.ndarray) -> np.ndarray:
    """Row-major contiguous view/copy that preserves 0-d shapes
    (np.ascontiguousarray would promote scalars to rank 1)."""
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


class Tensor:
    """n-dimensional numeric array, optionally attached to a differentiation tape."""

    __slots__ = ("data", "grad", "tape_id", "_tape")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = _contig(arr)
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # operator sugar; all routed through the op functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Parameter:
    """A named, trainable tensor. Names are assigned when a model registry is built."""

    __slots__ = ("name", "tensor", "requires_grad", "no_decay")

    def __init__(self, tensor: Tensor, requires_grad: bool = True, no_decay: bool = False):
        self.name = ""
        self.tensor = tensor
        self.requires_grad = requires_grad
        self.no_decay = no_decay

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.tensor.shape})"


@dataclass
class TapeNode:
    op: str
    input_ids: tuple
    output_id: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of ops for one forward pass; inputs always precede consumers."""

    nodes: list = field(default_factory=list)
    next_id: int = 0
    _watched: list = field(default_factory=list)

    def _alloc(self) -> int:
        nid = self.next_id
        self.next_id += 1
        return nid

    def watch(self, t: Tensor) -> None:
        """Register a leaf tensor; after backward() it will hold a gradient
        (zeros if the loss does not depend on it)."""
        if t._tape is not self:
            t._tape = self
            t.tape_id = self._alloc()
            self._watched.append(t)

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.stack.pop()
        return False


class _ThreadState(threading.local):
    def __init__(self):
        self.stack = []


_STATE = _ThreadState()


def _active() -> Optional[Tape]:
    return _STATE.stack[-1] if _STATE.stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{op} produced non-finite values")


def _out(op: str, inputs: Sequence, data: np.ndarray, backward) -> Tensor:
    """Wrap an op result; record a tape node if any input is attached."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = _contig(data)
    out.grad = None
    out.tape_id = None
    out._tape = None
    tape = _active()
    if tape is not None:
        ids = tuple(
            t.tape_id if isinstance(t, Tensor) and t._tape is tape else None
            for t in inputs
        )
        if any(i is not None for i in ids):
            out._tape = tape
            out.tape_id = tape._alloc()
            tape.nodes.append(TapeNode(op, ids, out.tape_id, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_array(x, like: Tensor):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.data.dtype)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    bd = _as_array(b, a)
    data = a.data + bd

    def backward(g):
        ga = _unbroadcast(g, a.data.shape)
        gb = _unbroadcast(g, bd.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _out("add", (a, b), data, backward)


def sub(a: Tensor, b) -> Tensor:
    bd = _as_array(b, a)
    data = a.data - bd

    def backward(g):
        ga = _unbroadcast(g, a.data.shape)
        gb = -_unbroadcast(g, bd.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _out("sub", (a, b), data, backward)


def neg(a: Tensor) -> Tensor:
    return _out("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    bd = _as_array(b, a)
    data = a.data * bd

    def backward(g):
        ga = _unbroadcast(g * bd, a.data.shape)
        gb = _unbroadcast(g * a.data, bd.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _out("mul", (a, b), data, backward)


def div(a: Tensor, b) -> Tensor:
    bd = _as_array(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / bd

    def backward(g):
        ga = _unbroadcast(g / bd, a.data.shape)
        gb = (
            _unbroadcast(-g * a.data / (bd * bd), bd.shape)
            if isinstance(b, Tensor)
            else None
        )
        return ga, gb

    return _out("div", (a, b), data, backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _out("exp", (a,), data, lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _out("log", (a,), data, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / data,)

    return _out("sqrt", (a,), data, backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _out("sigmoid", (a,), data, backward)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, not the tanh fit)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _out("gelu", (a,), data, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * data, axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _out("softmax", (a,), data, backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        return (g - np.exp(data) * np.sum(g, axis=axis, keepdims=True),)

    return _out("log_softmax", (a,), data, backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    src = a.data.shape
    return _out("reshape", (a,), data, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _out("transpose", (a,), data, lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _out("narrow", (a,), data, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    shapes = [t.data.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(
            i != axis % len(ref) and s[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch(f"concat on axis {axis} with shapes {shapes}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _out("concat", tuple(tensors), data, backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % len(src_shape) for ax in axes))
        return (np.broadcast_to(g, src_shape),)

    return _out("sum", (a,), data, backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape
    n = a.data.size if axis is None else int(
        np.prod([src_shape[ax % len(src_shape)] for ax in ((axis,) if isinstance(axis, int) else axis)])
    )

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % len(src_shape) for ax in axes))
        return (np.broadcast_to(g / n, src_shape),)

    return _out("mean", (a,), data, backward)


# ---------------------------------------------------------------------------
# matmul and convolutions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either ``b`` is a plain matrix applied to every leading slot of ``a``,
    or both operands carry identical leading (batch) dimensions.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        data = ad @ bd

        def backward(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:
        data = ad @ bd

        def backward(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return ga, gb

    else:
        raise ShapeMismatch(f"matmul leading dims differ: {ad.shape} @ {bd.shape}")
    return _out("matmul", (a, b), data, backward)


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    eff_h, eff_w = h + 2 * padding - kh, w + 2 * padding - kw
    if eff_h < 0 or eff_w < 0:
        raise ShapeMismatch(f"kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}")
    if eff_h % stride or eff_w % stride:
        raise ShapeMismatch(
            f"conv geometry not exact: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    return eff_h // stride + 1, eff_w // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of B x C x H x W input with O x C x kh x kw kernels."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {xd.shape}, {wd.shape}")
    bsz, c, h, width = xd.shape
    o, cw, kh, kw = wd.shape
    if cw != c:
        raise ShapeMismatch(f"conv2d channel mismatch: input {c}, weight {cw}")
    if b is not None and b.data.shape != (o,):
        raise ShapeMismatch(f"conv2d bias shape {b.data.shape}, expected ({o},)")
    ho, wo = _conv_geometry(h, width, kh, kw, stride, padding)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        xp = xd
        cols = xd.reshape(bsz, c, h * width)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = wd.reshape(o, c * kh * kw)
    data = (w2 @ cols).reshape(bsz, o, ho, wo)
    if b is not None:
        data = data + b.data[:, None, None]

    def backward(g):
        g2 = g.reshape(bsz, o, ho * wo)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gcols = w2.T @ g2
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            gx = gcols.reshape(xd.shape)
        else:
            gcols6 = gcols.reshape(bsz, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols6[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + width] if padding else gxp
        return gx, gw, gb

    return _out("conv2d", (x, w, b), data, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d): C x O x kh x kw kernels,
    output spatial dims (H-1)*stride + kh."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeMismatch(f"conv_transpose2d expects 4-d operands, got {xd.shape}, {wd.shape}")
    bsz, c, h, width = xd.shape
    cw, o, kh, kw = wd.shape
    if cw != c:
        raise ShapeMismatch(f"conv_transpose2d channel mismatch: input {c}, weight {cw}")
    if b is not None and b.data.shape != (o,):
        raise ShapeMismatch(f"conv_transpose2d bias shape {b.data.shape}, expected ({o},)")
    ho = (h - 1) * stride + kh
    wo = (width - 1) * stride + kw

    t = np.tensordot(xd, wd, axes=([1], [0]))  # (B,H,W,O,kh,kw)
    data = np.zeros((bsz, o, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            data[:, :, i:i + stride * h:stride, j:j + stride * width:stride] += t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if b is not None:
        data += b.data[:, None, None]

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gath = np.empty((bsz, o, kh, kw, h, width), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gath[:, :, i, j] = g[:, :, i:i + stride * h:stride, j:j + stride * width:stride]
        gx = np.tensordot(gath, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, gath, axes=([0, 2, 3], [0, 4, 5]))
        return np.ascontiguousarray(gx), gw, gb

    return _out("conv_transpose2d", (x, w, b), data, backward)


# ---------------------------------------------------------------------------
# pooling and normalization
# ---------------------------------------------------------------------------

def _pool_view(xd: np.ndarray, wh: int, ww: int):
    b, c, h, w = xd.shape
    if h % wh or w % ww:
        raise ShapeMismatch(f"pool window {wh}x{ww} does not tile {h}x{w}")
    return xd.reshape(b, c, h // wh, wh, w // ww, ww), h // wh, w // ww


def avg_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling; stride equals the window."""
    wh = ww = int(window)
    view, ho, wo = _pool_view(x.data, wh, ww)
    data = view.mean(axis=(3, 5))
    src = x.data.shape

    def backward(g):
        g6 = np.broadcast_to(
            g[:, :, :, None, :, None] / (wh * ww),
            (src[0], src[1], ho, wh, wo, ww),
        )
        return (g6.reshape(src),)

    return _out("avg_pool", (x,), data, backward)


def max_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first occurrence."""
    wh = ww = int(window)
    view, ho, wo = _pool_view(x.data, wh, ww)
    b, c = x.data.shape[:2]
    flat = view.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    src = x.data.shape

    def backward(g):
        onehot = idx[..., None] == np.arange(wh * ww)
        gflat = g[..., None] * onehot
        g6 = gflat.reshape(b, c, ho, wo, wh, ww).transpose(0, 1, 2, 4, 3, 5)
        return (g6.reshape(src),)

    return _out("max_pool", (x,), data, backward)


def global_avg_pool(x: Tensor, axes=(2, 3), keepdims: bool = False) -> Tensor:
    """Mean over the named axes (default: spatial extent of a B x C x H x W map)."""
    return reduce_mean(x, axis=tuple(axes), keepdims=keepdims)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero mean / unit variance over the last (feature) axis, then affine."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match feature dim {d}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xmu = xd - mu
    var = np.mean(xmu * xmu, axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xmu * ivar
    data = xhat * gamma.data + beta.data

    def backward(g):
        gbeta = g.reshape(-1, d).sum(axis=0)
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gxhat = g * gamma.data
        gx = ivar * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _out("layer_norm", (x, gamma, beta), data, backward)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by 1/(1-p)
    during training; exact identity at inference or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale
    return _out("dropout", (x,), data, lambda g: (g * keep * scale,))


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate gradients of every watched leaf reachable from ``loss``.

    Unreachable watched leaves receive zero gradients. The tape is traversed
    once, in reverse topological order.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.tape_id is None:
        raise DetachedTensor("loss tensor is not attached to a tape")
    grads = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        for tid, gin in zip(node.input_ids, node.backward(g)):
            if tid is None or gin is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + gin
            else:
                grads[tid] = gin
    for leaf in tape._watched:
        g = grads.get(leaf.tape_id)
        if g is None:
            leaf.grad = np.zeros_like(leaf.data)
        else:
            leaf.grad = _contig(np.asarray(g, dtype=leaf.data.dtype))


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central finite differences, coordinate by coordinate.

    ``f`` must be pure and deterministic; it is evaluated 2*size(x) + 1 times.
    """
    with Tape() as tape:
        tape.watch(x)
        out = f(x)
        if out.data.size != 1:
            raise NotScalar("grad_check target function must return a scalar")
        backward(out)
        analytic = x.grad.astype(np.float64)
    base = x.data
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat_num = numeric.reshape(-1)
    for i in range(base.size):
        probe = base.copy().reshape(-1)
        probe[i] += eps
        fp = float(f(Tensor(probe.reshape(base.shape), dtype=base.dtype)).data.reshape(-1)[0])
        probe[i] = base.reshape(-1)[i] - eps
        fm = float(f(Tensor(probe.reshape(base.shape), dtype=base.dtype)).data.reshape(-1)[0])
        flat_num[i] = (fp - fm) / (2.0 * eps)
    return _max_rel_err(analytic, numeric)


def grad_check_tensors(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Like grad_check but for a closure over several tensors (e.g. a block's
    input plus its parameters). Perturbs each tensor in place and restores it."""
    with Tape() as tape:
        for t in tensors:
            tape.watch(t)
        loss = loss_fn()
        if loss.data.size != 1:
            raise NotScalar("grad_check target function must return a scalar")
        backward(loss)
        analytic = [t.grad.astype(np.float64).copy() for t in tensors]
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(loss_fn().data.reshape(-1)[0])
            flat[i] = old - eps
            fm = float(loss_fn().data.reshape(-1)[0])
            flat[i] = old
            numeric[i] = (fp - fm) / (2.0 * eps)
        worst = max(worst, _max_rel_err(ana.reshape(-1), numeric))
    return worst
