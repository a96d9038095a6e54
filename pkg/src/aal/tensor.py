"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operations the classifier and the attack math
need: 2-D cross-correlation, channel pooling, elementwise nonlinearities,
dense layers, pooling, and softmax cross-entropy. Every differentiable
op records itself on the active Tape; Tape.backward replays the records
in reverse execution order and accumulates gradients.

All reductions use numpy's fixed sequential algorithms, so repeated runs
of an identical op sequence produce bit-identical buffers.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NonFiniteError",
    "set_checked",
    "add",
    "mul",
    "sub",
    "neg",
    "relu",
    "sigmoid",
    "conv2d",
    "channel_pool",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "sum_all",
    "grad_check",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_checked = False


class ShapeError(ValueError):
    """Operand shapes or dtypes violate an op's contract."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, nested tapes, loss not on tape."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf crossed an op boundary while checked mode is on."""


def set_checked(enabled):
    """Enable NaN/Inf rejection at op boundaries (slower; used by tests)."""
    global _checked
    _checked = bool(enabled)


def _require_finite(where, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values detected")


class Tensor:
    """Dense float32/float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "_requires_grad", "grad", "_tracked", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if _checked:
            _require_finite("Tensor", arr)
        self.data = arr
        self._requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = self._requires_grad
        self._tape = None

    @property
    def requires_grad(self):
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag):
        # leaf toggle; lets callers freeze parameters around a pass
        self._requires_grad = bool(flag)
        self._tracked = self._requires_grad

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
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def sum(self):
        return sum_all(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))


_active_tape = None


class Tape:
    """Ordered record of executed ops.

    Use as a context manager around the forward pass; call backward(loss)
    afterwards. A tape is single-use: backward consumes it.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a tape is already active; nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def backward(self, loss):
        """Accumulate gradients of the scalar loss into every tracked tensor."""
        if self._consumed:
            raise TapeError("tape already consumed by backward; re-run the forward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError("backward requires a scalar loss tensor")
        if loss._tape is not self:
            raise TapeError("loss is not an output of this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for inputs, out, backward_fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            for t, gt in zip(inputs, backward_fn(g)):
                if gt is None or not t._tracked:
                    continue
                if _checked:
                    _require_finite("backward", gt)
                t.grad = gt if t.grad is None else t.grad + gt


def _record(out, inputs, backward_fn):
    tape = _active_tape
    if tape is None or not any(t._tracked for t in inputs):
        return
    out._tracked = True
    out._tape = tape
    tape._records.append((inputs, out, backward_fn))


def _check_dtypes(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        out = Tensor(a.data + c)
        _record(out, (a,), lambda g: (g,))
        return out
    _check_dtypes("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _record(out, (a, b), bw)
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_dtypes("sub", a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    _record(out, (a, b), bw)
    return out


def neg(a):
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b):
    """Hadamard product; broadcasts, e.g. an [N,1,H,W] map over channels."""
    if not isinstance(b, Tensor):
        c = float(b)
        out = Tensor(a.data * c)
        _record(out, (a,), lambda g: (g * c,))
        return out
    _check_dtypes("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    _record(out, (a, b), bw)
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    _record(out, (x,), bw)
    return out


def sigmoid(x):
    """Numerically stable logistic; output strictly inside (0, 1)."""
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s)

    def bw(g):
        return (g * s * (1.0 - s),)

    _record(out, (x,), bw)
    return out


def sum_all(x):
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    _record(out, (x,), bw)
    return out


def _pad_nchw(x, padding):
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


def _im2col(xp, k, stride):
    """Patch matrix [N, C*k*k, Ho*Wo] of a pre-padded input."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u : u + (ho - 1) * stride + 1 : stride,
                                  v : v + (wo - 1) * stride + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _direct_ok(f, c, k, stride):
    # few-filter wide-kernel convs (the attention conv): accumulate shifted
    # slices instead of materializing a k*k-times-amplified patch matrix
    return stride == 1 and k >= 5 and f * c * k * k <= 128


def _corr_direct(xp, w, ho, wo):
    n = xp.shape[0]
    f, c, k, _ = w.shape
    out = np.zeros((n, f, ho, wo), dtype=xp.dtype)
    for fi in range(f):
        o = out[:, fi]
        for ci in range(c):
            for u in range(k):
                for v in range(k):
                    o += w[fi, ci, u, v] * xp[:, ci, u : u + ho, v : v + wo]
    return out


def _weight_grad_direct(g, xp, f, c, k, ho, wo):
    gw = np.empty((f, c, k, k), dtype=g.dtype)
    for fi in range(f):
        gf = g[:, fi]
        for ci in range(c):
            for u in range(k):
                for v in range(k):
                    gw[fi, ci, u, v] = np.einsum(
                        "nhw,nhw->", gf, xp[:, ci, u : u + ho, v : v + wo]
                    )
    return gw


def _corr_data(x, w, stride, padding):
    """Raw cross-correlation: out [N,F,Ho*Wo], plus saved cols or padded input."""
    n = x.shape[0]
    f, c, k, _ = w.shape
    xp = _pad_nchw(x, padding)
    if _direct_ok(f, c, k, stride):
        ho = xp.shape[2] - k + 1
        wo = xp.shape[3] - k + 1
        out = _corr_direct(xp, w, ho, wo)
        return out.reshape(n, f, ho * wo), None, xp, ho, wo
    cols, ho, wo = _im2col(xp, k, stride)
    return np.matmul(w.reshape(f, -1), cols), cols, None, ho, wo


def _col2im(gcols, xshape, k, stride, padding, ho, wo):
    n, c, h, w = xshape
    gc = gcols.reshape(n, c, k, k, ho, wo)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u : u + (ho - 1) * stride + 1 : stride,
                v : v + (wo - 1) * stride + 1 : stride] += gc[:, :, u, v]
    if padding:
        return gxp[:, :, padding : padding + h, padding : padding + w]
    return gxp


def _conv_input_grad(g, w, xshape, k, stride, padding, ho, wo, wmat):
    n, c, h, wd = xshape
    if stride == 1:
        # full correlation with the flipped, channel-swapped kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        full, _, _, _, _ = _corr_data(g, wt, 1, k - 1)
        gxp = full.reshape(n, c, h + 2 * padding, wd + 2 * padding)
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + wd]
        return gxp
    gcols = np.matmul(wmat.T, g.reshape(n, -1, ho * wo))
    return _col2im(gcols, xshape, k, stride, padding, ho, wo)


def conv2d(x, w, b, stride=1, padding=0):
    """2-D cross-correlation of NCHW input with an [F,C,k,k] kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D NCHW, got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [F,C,k,k], got {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if cw != c:
        raise ShapeError(f"conv2d: weight channels {cw} do not match input channels {c}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {f} filters")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    for name, extent in (("height", h), ("width", wd)):
        span = extent + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(
                f"conv2d: {name} {extent} incompatible with kernel {k}, "
                f"padding {padding}, stride {stride}"
            )
    _check_dtypes("conv2d", x, w, b)

    out_nfl, cols, xp, ho, wo = _corr_data(x.data, w.data, stride, padding)
    l = ho * wo
    wmat = w.data.reshape(f, c * k * k)
    out_nfl += b.data.reshape(1, f, 1)
    out = Tensor(out_nfl.reshape(n, f, ho, wo))
    need_x, need_w, need_b = x._tracked, w._tracked, b._tracked

    def bw(g):
        gx = gw = gb = None
        if need_w:
            if cols is None:
                gw = _weight_grad_direct(g, xp, f, c, k, ho, wo)
            else:
                g3 = g.reshape(n, f, l)
                gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, k, k)
        if need_b:
            gb = g.sum(axis=(0, 2, 3))
        if need_x:
            gx = _conv_input_grad(g, w.data, (n, c, h, wd), k, stride, padding, ho, wo, wmat)
        return gx, gw, gb

    _record(out, (x, w, b), bw)
    return out


def channel_pool(x):
    """Per-pixel channel descriptor: [mean over C, max over C] as 2 channels.

    Max ties route the gradient to the lowest channel index.
    """
    if x.ndim != 4:
        raise ShapeError(f"channel_pool: input must be 4-D NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if c < 1:
        raise ShapeError("channel_pool: need at least one channel")
    d = x.data
    mean = d.mean(axis=1, keepdims=True)
    idx = d.argmax(axis=1)  # first attaining index
    mx = np.take_along_axis(d, idx[:, None], axis=1)
    out = Tensor(np.concatenate([mean, mx], axis=1))

    def bw(g):
        gx = np.broadcast_to(g[:, 0:1] / c, d.shape).copy()
        scatter = np.zeros_like(d)
        np.put_along_axis(scatter, idx[:, None], g[:, 1:2], axis=1)
        return (gx + scatter,)

    _record(out, (x,), bw)
    return out


def max_pool2d(x):
    """2x2 max pooling with stride 2; window ties go to the first element."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be 4-D NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial size {h}x{w} must be even")
    d = x.data
    # the four window corners in linear-index order
    quads = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out_data = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    out = Tensor(out_data)

    def bw(g):
        gx = np.zeros_like(d)
        views = (gx[:, :, 0::2, 0::2], gx[:, :, 0::2, 1::2], gx[:, :, 1::2, 0::2], gx[:, :, 1::2, 1::2])
        taken = np.zeros(out_data.shape, dtype=bool)
        for q, view in zip(quads, views):
            hit = (q == out_data) & ~taken
            view[...] = np.where(hit, g, 0)
            taken |= hit
        return (gx,)

    _record(out, (x,), bw)
    return out


def global_avg_pool(x):
    """Spatial mean over H and W: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    _record(out, (x,), bw)
    return out


def linear(x, w, b):
    """Dense layer: [N,D] @ [K,D]^T + [K]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear: expected 2-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} do not match weight features {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape[0]} outputs")
    _check_dtypes("linear", x, w, b)
    xd, wd = x.data, w.data
    out = Tensor(xd @ wd.T + b.data)
    need_x, need_w, need_b = x._tracked, w._tracked, b._tracked

    def bw(g):
        return (
            g @ wd if need_x else None,
            g.T @ xd if need_w else None,
            g.sum(axis=0) if need_b else None,
        )

    _record(out, (x, w, b), bw)
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels against softmax of logits."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: labels must be integers")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    out = Tensor(np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype))

    def bw(g):
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    _record(out, (logits,), bw)
    return out


def grad_check(f, point, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map a single Tensor to a scalar Tensor using taped ops only.
    The check runs in float64 regardless of the point's dtype.
    """
    pt = Tensor(point.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(pt)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: non-finite function value")
    tape.backward(out)
    analytic = (pt.grad if pt.grad is not None else np.zeros_like(pt.data)).reshape(-1).copy()

    flat = pt.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(pt.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(pt.data)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check: non-finite intermediate during perturbation")
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
