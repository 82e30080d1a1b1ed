"""Dense tensor engine with taped reverse-mode differentiation.

The engine is deliberately small: it supports exactly the operation set the
fusion blocks need (projections, 1x1 and 3x3 convolutions, resampling,
layer normalization, gated activations, pooling, sequence reordering and
reductions), each with an analytic backward pass.  Operations executed while
a :class:`GradTape` is active are recorded on it; :func:`backward` replays
the tape in exact reverse execution order.  Outside a tape the same
functions run in plain inference mode with no bookkeeping.

Conventions:

* tensors are dense row-major numpy arrays of rank 1..4 in ``f32`` or
  ``f64`` (scalars are carried as shape ``(1,)``),
* channel-last layout everywhere: sequences are ``(L, C)`` or ``(B, L, C)``,
  images are ``(H, W, C)`` or ``(B, H, W, C)``,
* forward compute defaults to ``f32``; gradient checking builds the whole
  graph in ``f64``.
"""

from __future__ import annotations

import functools

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ParamStore",
    "ShapeError",
    "NumericError",
    "UsageError",
    "backward",
    "linear",
    "conv2d_1x1",
    "conv2d_3x3",
    "conv2d_resample",
    "resample_weight_shape",
    "layer_norm",
    "activation",
    "silu",
    "softplus",
    "sigmoid",
    "exp",
    "global_max_pool",
    "add",
    "mul",
    "scale",
    "reshape",
    "swap_spatial",
    "flip_rows",
    "pixel_shuffle2",
    "bicubic_upsample2",
    "sum_all",
    "mean_all",
    "abs_val",
    "kaiming_uniform",
]

DTYPES = {"f32": np.float32, "f64": np.float64}

RESAMPLE_KINDS = ("down_stride2", "up_shuffle2", "up_bicubic2", "same_3x3")

_SOFTPLUS_CUTOFF = 20.0


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when an operation produces or receives non-finite values."""


class UsageError(RuntimeError):
    """Raised on API misuse, e.g. replaying an already-consumed tape."""


# ---------------------------------------------------------------------------
# Array-level math helpers (stable and vectorized; shared with the kernels)
# ---------------------------------------------------------------------------


def _np_sigmoid(v):
    z = np.exp(-np.abs(v))
    p = 1.0 / (1.0 + z)
    return np.where(v >= 0, p, 1.0 - p)


def _np_softplus(v):
    # For v > 20 return v itself: exp(20) already drowns the +1 at f32.
    # Floored at the dtype's smallest normal so the result stays strictly
    # positive even where exp() underflows.
    out = np.where(v > _SOFTPLUS_CUTOFF, v, np.log1p(np.exp(np.minimum(v, _SOFTPLUS_CUTOFF))))
    return np.maximum(out, np.finfo(out.dtype).tiny)


def _np_softplus_deriv(v):
    return np.where(v > _SOFTPLUS_CUTOFF, 1.0, _np_sigmoid(v))


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense real array of rank 1..4 plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensor rank must be 1..4, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def dtype_name(self):
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype_name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale(self, 1.0, offset=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return scale(self, 1.0, offset=-float(other))

    def __rsub__(self, other):
        return scale(self, -1.0, offset=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


_ACTIVE_TAPE = None


class GradTape:
    """Recorder for the reverse pass.

    Nodes are appended in execution order; :func:`backward` visits them in
    exact reverse order.  A tape can be consumed once; consumption releases
    the recorded closures (and the activations they hold) as it goes, so
    peak memory stays near the forward pass's own footprint.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False
        self._outer = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def record(self, out, fn):
        self._nodes.append((out, fn))

    def __len__(self):
        return len(self._nodes)


def _recording(*tensors):
    """Return the active tape if any input participates in differentiation."""
    if _ACTIVE_TAPE is None:
        return None
    for t in tensors:
        if t is not None and (t.requires_grad or t._tape is not None):
            return _ACTIVE_TAPE
    return None


def _out(data, tape):
    t = Tensor(data)
    if tape is not None:
        t.requires_grad = True
        t._tape = tape
    return t


def _accum(t, g, owned=False):
    """Add ``g`` into ``t.grad``.

    ``owned`` promises that the caller freshly allocated ``g`` and will not
    reuse it, letting the first accumulation adopt the buffer without a copy.
    """
    if t is None or not (t.requires_grad or t._tape is not None):
        return
    if t.grad is None:
        t.grad = g if owned else np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss, tape, params=None):
    """Run the reverse pass of ``tape`` seeding from the scalar ``loss``.

    Every tensor that influenced ``loss`` accumulates its gradient; if a
    :class:`ParamStore` is given, parameters the loss never touched end up
    with explicit zero gradients.  A tape can only be consumed once.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise UsageError("loss was not produced under the given tape")
    if tape._consumed:
        raise UsageError("tape already consumed; build a fresh graph to backpropagate again")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    nodes = tape._nodes
    for i in range(len(nodes) - 1, -1, -1):
        out, fn = nodes[i]
        fn()
        # All consumers of `out` ran already (reverse execution order), so its
        # gradient and this node's saved activations can be released now.
        out.grad = None
        nodes[i] = None
    nodes.clear()
    if params is not None:
        for name in params.names():
            p = params[name]
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _recording(a, b)
    out = _out(a.data + b.data, tape)
    if tape is not None:
        def _bwd():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))
        tape.record(out, _bwd)
    return out


def mul(a, b):
    tape = _recording(a, b)
    out = _out(a.data * b.data, tape)
    if tape is not None:
        def _bwd():
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape), owned=True)
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape), owned=True)
        tape.record(out, _bwd)
    return out


def scale(a, factor, offset=0.0):
    tape = _recording(a)
    out = _out(a.data * factor + offset if offset else a.data * factor, tape)
    if tape is not None:
        def _bwd():
            _accum(a, out.grad * factor, owned=True)
        tape.record(out, _bwd)
    return out


def exp(a):
    tape = _recording(a)
    data = np.exp(a.data)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            _accum(a, out.grad * data, owned=True)
        tape.record(out, _bwd)
    return out


def abs_val(a):
    tape = _recording(a)
    out = _out(np.abs(a.data), tape)
    if tape is not None:
        sign = np.sign(a.data)
        def _bwd():
            _accum(a, out.grad * sign, owned=True)
        tape.record(out, _bwd)
    return out


def sum_all(a):
    tape = _recording(a)
    out = _out(a.data.sum(dtype=a.data.dtype).reshape(1), tape)
    if tape is not None:
        def _bwd():
            _accum(a, np.full(a.data.shape, out.grad[0], dtype=a.data.dtype), owned=True)
        tape.record(out, _bwd)
    return out


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def sigmoid(a):
    tape = _recording(a)
    data = _np_sigmoid(a.data)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            _accum(a, out.grad * data * (1.0 - data), owned=True)
        tape.record(out, _bwd)
    return out


def silu(a):
    tape = _recording(a)
    s = _np_sigmoid(a.data)
    out = _out(a.data * s, tape)
    if tape is not None:
        def _bwd():
            _accum(a, out.grad * (s * (1.0 + a.data * (1.0 - s))), owned=True)
        tape.record(out, _bwd)
    return out


def softplus(a):
    tape = _recording(a)
    out = _out(_np_softplus(a.data), tape)
    if tape is not None:
        deriv = _np_softplus_deriv(a.data)
        def _bwd():
            _accum(a, out.grad * deriv, owned=True)
        tape.record(out, _bwd)
    return out


_ACTIVATIONS = {"silu": silu, "softplus": softplus, "sigmoid": sigmoid}


def activation(a, kind):
    """Elementwise nonlinearity: ``silu``, ``softplus`` or ``sigmoid``."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# Projections and convolutions
# ---------------------------------------------------------------------------


def linear(x, w, b=None):
    """Affine map along the last axis: ``out[..., j] = sum_i x[..., i] w[i, j] (+ b[j])``."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear: inner dimensions disagree, x has shape {x.data.shape} "
            f"but weight has shape {w.data.shape}"
        )
    cin, cout = w.data.shape
    xm = np.ascontiguousarray(x.data).reshape(-1, cin)
    data = xm @ w.data
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(
                f"linear: bias shape {b.data.shape} does not match output width {cout}"
            )
        data += b.data
    tape = _recording(x, w, b)
    out = _out(data.reshape(x.data.shape[:-1] + (cout,)), tape)
    if tape is not None:
        def _bwd():
            gm = out.grad.reshape(-1, cout)
            _accum(x, (gm @ w.data.T).reshape(x.data.shape), owned=True)
            _accum(w, xm.T @ gm, owned=True)
            if b is not None:
                _accum(b, gm.sum(axis=0), owned=True)
        tape.record(out, _bwd)
    return out


def conv2d_1x1(x, w, b=None):
    """Pointwise channel map on ``(..., H, W, Cin)``; equals linear on the flattened pixels."""
    if x.data.ndim < 3:
        raise ShapeError(f"conv2d_1x1 expects an (..., H, W, C) image, got shape {x.data.shape}")
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"conv2d_1x1: channel mismatch, image has {x.data.shape[-1]} channels "
            f"but weight has shape {w.data.shape}"
        )
    return linear(x, w, b)


def _batched_view(x):
    """View (H, W, C) as (1, H, W, C); pass (B, H, W, C) through."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected an (H, W, C) or (B, H, W, C) image, got shape {x.shape}")


def conv2d_3x3(x, w, b=None, stride=1):
    """3x3 convolution with zero padding 1; ``stride`` 1 preserves and 2 halves H, W."""
    if w.data.ndim != 4 or w.data.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_3x3 weight must be (3, 3, Cin, Cout), got {w.data.shape}")
    xb, squeezed = _batched_view(x.data)
    bsz, h, wd, cin = xb.shape
    if cin != w.data.shape[2]:
        raise ShapeError(
            f"conv2d_3x3: image has {cin} channels but weight expects {w.data.shape[2]}"
        )
    if stride == 2 and (h % 2 or wd % 2):
        raise ShapeError(f"down_stride2 needs even extents, got {h}x{wd}")
    cout = w.data.shape[3]
    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho, wo = h // stride, wd // stride
    cols = np.empty((bsz, ho, wo, 9, cin), dtype=xb.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + h:stride, j:j + wd:stride, :]
    wm = w.data.reshape(9 * cin, cout)
    data = cols.reshape(-1, 9 * cin) @ wm
    if b is not None:
        data += b.data
    data = data.reshape(bsz, ho, wo, cout)
    if squeezed:
        data = data[0]
    tape = _recording(x, w, b)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            g = out.grad if not squeezed else out.grad[None]
            gm = g.reshape(-1, cout)
            _accum(w, (cols.reshape(-1, 9 * cin).T @ gm).reshape(3, 3, cin, cout), owned=True)
            if b is not None:
                _accum(b, gm.sum(axis=0), owned=True)
            gcols = (gm @ wm.T).reshape(bsz, ho, wo, 9, cin)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h:stride, j:j + wd:stride, :] += gcols[:, :, :, 3 * i + j, :]
            gx = np.ascontiguousarray(gxp[:, 1:1 + h, 1:1 + wd, :])
            _accum(x, gx[0] if squeezed else gx, owned=True)
        tape.record(out, _bwd)
    return out


def pixel_shuffle2(x):
    """Depth-to-space: ``(..., H, W, 4C) -> (..., 2H, 2W, C)``.

    Channel block ``(dy*2 + dx)*C + c`` lands at output offset ``(dy, dx)``.
    """
    xb, squeezed = _batched_view(x.data)
    bsz, h, wd, c4 = xb.shape
    if c4 % 4:
        raise ShapeError(f"pixel_shuffle2 needs channels divisible by 4, got {c4}")
    c = c4 // 4
    data = (
        xb.reshape(bsz, h, wd, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(bsz, 2 * h, 2 * wd, c)
    )
    if squeezed:
        data = data[0]
    tape = _recording(x)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            g = out.grad if not squeezed else out.grad[None]
            gx = (
                g.reshape(bsz, h, 2, wd, 2, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(bsz, h, wd, c4)
            )
            _accum(x, gx[0] if squeezed else gx, owned=True)
        tape.record(out, _bwd)
    return out


@functools.lru_cache(maxsize=None)
def _bicubic_matrix(n_in, dtype_name):
    """Dense (2n, n) doubling matrix for Catmull-Rom (a = -0.5) interpolation.

    Output samples sit at half-pixel centres: src = (dst + 0.5) / 2 - 0.5,
    with edge clamping.  Rows sum to one, so constants are reproduced.
    """
    a = -0.5

    def kernel(s):
        s = abs(s)
        if s <= 1.0:
            return (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0
        if s < 2.0:
            return a * (s**3 - 5.0 * s**2 + 8.0 * s - 4.0)
        return 0.0

    m = np.zeros((2 * n_in, n_in), dtype=DTYPES[dtype_name])
    for dst in range(2 * n_in):
        src = (dst + 0.5) / 2.0 - 0.5
        base = int(np.floor(src))
        for k in range(base - 1, base + 3):
            w = kernel(src - k)
            m[dst, min(max(k, 0), n_in - 1)] += w
    return m


def bicubic_upsample2(x):
    """Separable bicubic (a = -0.5) doubling of H and W on an (..., H, W, C) image."""
    xb, squeezed = _batched_view(x.data)
    _, h, wd, _ = xb.shape
    dname = "f32" if xb.dtype == np.float32 else "f64"
    uh = _bicubic_matrix(h, dname)
    uw = _bicubic_matrix(wd, dname)
    data = np.einsum("ph,bhwc->bpwc", uh, xb, optimize=True)
    data = np.einsum("qw,bpwc->bpqc", uw, data, optimize=True)
    if squeezed:
        data = data[0]
    tape = _recording(x)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            g = out.grad if not squeezed else out.grad[None]
            gx = np.einsum("qw,bpqc->bpwc", uw, g, optimize=True)
            gx = np.einsum("ph,bpwc->bhwc", uh, gx, optimize=True)
            _accum(x, gx[0] if squeezed else gx, owned=True)
        tape.record(out, _bwd)
    return out


def resample_weight_shape(kind, cin, cout):
    """Weight/bias shapes required by :func:`conv2d_resample` for each kind."""
    if kind in ("down_stride2", "same_3x3"):
        return (3, 3, cin, cout), (cout,)
    if kind == "up_shuffle2":
        return (cin, 4 * cout), (4 * cout,)
    if kind == "up_bicubic2":
        return (cin, cout), (cout,)
    raise ValueError(f"unknown resample kind {kind!r}")


def conv2d_resample(x, kind, w, b=None):
    """Resolution/width-changing convolution.

    ``down_stride2``: stride-2 3x3 conv (halves H, W).
    ``up_shuffle2``:  1x1 conv to 4*Cout channels then depth-to-space (doubles H, W).
    ``up_bicubic2``:  bicubic doubling then 1x1 conv.
    ``same_3x3``:     3x3 conv, zero padding 1 (shape preserving).
    """
    if kind == "down_stride2":
        return conv2d_3x3(x, w, b, stride=2)
    if kind == "same_3x3":
        return conv2d_3x3(x, w, b, stride=1)
    if kind == "up_shuffle2":
        return pixel_shuffle2(conv2d_1x1(x, w, b))
    if kind == "up_bicubic2":
        return conv2d_1x1(bicubic_upsample2(x), w, b)
    raise ValueError(f"unknown resample kind {kind!r}")


# ---------------------------------------------------------------------------
# Normalization and pooling
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _mean_weights(c, dtype_name):
    return np.full(c, 1.0 / c, dtype=DTYPES[dtype_name])


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each position's channel vector (last axis) to zero mean, unit variance."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({c},), got {gamma.data.shape} and {beta.data.shape}"
        )
    dname = "f32" if x.data.dtype == np.float32 else "f64"
    mw = _mean_weights(c, dname)
    xm = np.ascontiguousarray(x.data).reshape(-1, c)
    mu = xm @ mw
    xc = xm - mu[:, None]
    var = (xc * xc) @ mw
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv[:, None]
    data = (xhat * gamma.data + beta.data).reshape(x.data.shape)
    tape = _recording(x, gamma, beta)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            gm = out.grad.reshape(-1, c)
            _accum(beta, gm.sum(axis=0), owned=True)
            _accum(gamma, (gm * xhat).sum(axis=0), owned=True)
            gh = gm * gamma.data
            m1 = gh @ mw
            m2 = (gh * xhat) @ mw
            gx = (gh - m1[:, None] - xhat * m2[:, None]) * inv[:, None]
            _accum(x, gx.reshape(x.data.shape), owned=True)
        tape.record(out, _bwd)
    return out


def global_max_pool(x):
    """Per-channel spatial maximum: ``(..., H, W, S) -> (..., 1, 1, S)``.

    The backward pass routes the gradient to the first maximum in row-major
    spatial order, making ties deterministic.
    """
    xb, squeezed = _batched_view(x.data)
    bsz, h, wd, s = xb.shape
    flat = xb.reshape(bsz, h * wd, s)
    idx = flat.argmax(axis=1)
    data = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(bsz, 1, 1, s)
    if squeezed:
        data = data[0]
    tape = _recording(x)
    out = _out(data, tape)
    if tape is not None:
        def _bwd():
            g = out.grad if not squeezed else out.grad[None]
            gx = np.zeros((bsz, h * wd, s), dtype=xb.dtype)
            np.put_along_axis(gx, idx[:, None, :], g.reshape(bsz, 1, s), axis=1)
            gx = gx.reshape(bsz, h, wd, s)
            _accum(x, gx[0] if squeezed else gx, owned=True)
        tape.record(out, _bwd)
    return out


# ---------------------------------------------------------------------------
# Shape and order manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    tape = _recording(x)
    out = _out(np.ascontiguousarray(x.data).reshape(shape), tape)
    if tape is not None:
        def _bwd():
            _accum(x, out.grad.reshape(x.data.shape))
        tape.record(out, _bwd)
    return out


def swap_spatial(x):
    """Transpose the two spatial axes of an ``(..., H, W, C)`` image."""
    if x.data.ndim < 3:
        raise ShapeError(f"swap_spatial expects an (..., H, W, C) image, got {x.shape}")
    tape = _recording(x)
    out = _out(np.ascontiguousarray(np.swapaxes(x.data, -3, -2)), tape)
    if tape is not None:
        def _bwd():
            _accum(x, np.ascontiguousarray(np.swapaxes(out.grad, -3, -2)), owned=True)
        tape.record(out, _bwd)
    return out


def flip_rows(x):
    """Reverse the position axis (axis -2) of a sequence tensor."""
    tape = _recording(x)
    out = _out(np.ascontiguousarray(np.flip(x.data, axis=-2)), tape)
    if tape is not None:
        def _bwd():
            _accum(x, np.ascontiguousarray(np.flip(out.grad, axis=-2)), owned=True)
        tape.record(out, _bwd)
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named learnable tensors plus their gradients.

    Names are hierarchical dotted paths, unique, and iterate in insertion
    order; that order is what makes optimizer updates and checkpoint files
    reproducible.
    """

    def __init__(self):
        self._params = {}

    def add(self, name, array, dtype=None):
        if name in self._params:
            raise UsageError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(array, dtype=dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    @property
    def gradients(self):
        """Gradient arrays by name; parameters without one report zeros."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def total_size(self):
        return sum(t.size for t in self._params.values())

    def astype(self, dtype):
        """A new store with every parameter cast to ``dtype`` (same names/order)."""
        other = ParamStore()
        for name, t in self._params.items():
            other.add(name, t.data.astype(dtype))
        return other
