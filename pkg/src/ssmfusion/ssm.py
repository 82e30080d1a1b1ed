"""Discretized selective state-space kernels.

A scan instance is a per-position affine recurrence over hidden states of
size ``N`` kept independently for each of ``C`` channels:

    h_t = A_bar[t] * h_{t-1} + B_bar[t] * x_t,      y_t = C_proj[t] . h_t

``A_bar = exp(delta * A)`` and ``B_bar = delta * B`` come from zero-order
hold discretization of a continuous system with a strictly negative state
matrix, so every ``A_bar`` entry lies in (0, 1) and the recurrence is
contractive.  The projection parameters ``B``, ``C`` and the timescale
``delta`` are generated from an input sequence; in the dual-input variant
(:func:`fssm_block`) they come from a second sequence while the first one
is scanned.

Scan engines:

* :func:`scan_sequential` -- the plain ordered recurrence,
* :func:`scan_parallel`   -- a two-pass chunked prefix scan over the
  associative operator ``(a1, b1) o (a2, b2) = (a2*a1, a2*b1 + b2)`` with a
  sequential base case of 64 positions,
* a fused kernel used by :func:`ssm_block`/:func:`fssm_block` that
  discretizes in vectorized numpy and runs the recurrence in a compiled
  time-major loop (pure-numpy chunked fallback when numba is unavailable).

Backward passes run an explicit adjoint recurrence in reverse time,
reusing the discretized coefficients saved by the forward pass.  All
kernels are pure and deterministic; reduction orders are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


CHUNK = 64

FULL_INTERACTION = (True, True, True)


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------


@dataclass
class SsmParams:
    """Learnable bundle for one scan lane.

    ``a`` is the diagonal-per-channel state matrix (strictly negative),
    ``w_b``/``w_c`` project positions onto the N-dimensional input/output
    couplings, and ``w_delta``/``bias_delta`` produce the pre-softplus
    timescale.  The B/C/delta projections carry no bias beyond
    ``bias_delta`` itself.
    """

    a: Tensor        # (C, N), all entries < 0
    w_b: Tensor      # (C, N)
    w_c: Tensor      # (C, N)
    w_delta: Tensor  # (C, C)
    bias_delta: Tensor  # (C,)

    @property
    def channels(self):
        return self.a.shape[0]

    @property
    def state_size(self):
        return self.a.shape[1]

    def validate(self):
        c, n = self.a.shape
        if self.w_b.shape != (c, n) or self.w_c.shape != (c, n):
            raise ShapeError("w_b/w_c must have shape (C, N)")
        if self.w_delta.shape != (c, c) or self.bias_delta.shape != (c,):
            raise ShapeError("w_delta must be (C, C) and bias_delta (C,)")
        if not np.all(self.a.data < 0):
            raise NumericError("state matrix must be strictly negative for a stable scan")


@dataclass
class DiscretizedSsm:
    """Per-position discretized parameters: ``A_bar``, ``B_bar`` in (L, C, N)
    (or batched ``(B, L, C, N)``) and the output projection ``C_proj`` in
    (L, N)."""

    a_bar: Tensor
    b_bar: Tensor
    c_proj: Tensor


@dataclass
class ScanState:
    """Hidden state carried between positions; zeros at sequence start."""

    h: np.ndarray

    @classmethod
    def zeros(cls, channels, state_size, dtype=np.float32):
        return cls(np.zeros((channels, state_size), dtype=dtype))


def init_ssm_params(store, prefix, channels, state_size, rng, dtype=np.float32):
    """Create and register one lane's parameters.

    The state matrix starts at ``A[c, n] = -(n + 1)`` and the timescale bias
    is set so the initial softplus output is log-uniform in [1e-3, 1e-1].
    """
    a0 = -np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1))
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    bias0 = np.log(np.expm1(dt))  # inverse softplus
    return SsmParams(
        a=store.add(f"{prefix}.a", a0.astype(dtype)),
        w_b=store.add(f"{prefix}.w_b", T.kaiming_uniform(rng, (channels, state_size), channels, dtype)),
        w_c=store.add(f"{prefix}.w_c", T.kaiming_uniform(rng, (channels, state_size), channels, dtype)),
        w_delta=store.add(f"{prefix}.w_delta", T.kaiming_uniform(rng, (channels, channels), channels, dtype)),
        bias_delta=store.add(f"{prefix}.bias_delta", bias0.astype(dtype)),
    )


# ---------------------------------------------------------------------------
# Parameter generation + ZOH discretization (composed, public)
# ---------------------------------------------------------------------------


def generate_and_discretize(x_param, p):
    """Derive per-position (A_bar, B_bar, C_proj) from a sequence.

    ``B_bar`` uses the first-order hold approximation ``delta * B``;
    ``A_bar = exp(delta * A)`` stays in (0, 1) because ``delta > 0`` and
    ``A < 0``.
    """
    p.validate()
    if x_param.shape[-1] != p.channels:
        raise ShapeError(
            f"sequence has {x_param.shape[-1]} channels, parameters expect {p.channels}"
        )
    b = T.linear(x_param, p.w_b)    # (..., L, N)
    c = T.linear(x_param, p.w_c)    # (..., L, N)
    delta = T.softplus(T.linear(x_param, p.w_delta, p.bias_delta))
    if not np.all(np.isfinite(delta.data)):
        raise NumericError("timescale delta is not finite")
    dcol = T.reshape(delta, delta.shape + (1,))           # (..., L, C, 1)
    brow = T.reshape(b, b.shape[:-1] + (1, b.shape[-1]))  # (..., L, 1, N)
    a_bar = T.exp(T.mul(dcol, p.a))
    b_bar = T.mul(dcol, brow)
    return DiscretizedSsm(a_bar=a_bar, b_bar=b_bar, c_proj=c)


# ---------------------------------------------------------------------------
# Chunked associative scan (two-pass, sequential base case of 64)
# ---------------------------------------------------------------------------


def _affine_scan_chunked(a, b):
    """Inclusive scan of affine maps ``h -> a_t h + b_t`` applied to h0 = 0.

    ``a``/``b`` have shape (G, L, ...).  Positions are split into chunks of
    ``CHUNK``; pass one scans inside every chunk at once (vectorized across
    chunks), then chunk summaries are scanned and broadcast back.
    """
    g, length = a.shape[:2]
    rest = a.shape[2:]
    k = -(-length // CHUNK)
    pad = k * CHUNK - length
    if pad:
        a = np.concatenate([a, np.ones((g, pad) + rest, dtype=a.dtype)], axis=1)
        b = np.concatenate([b, np.zeros((g, pad) + rest, dtype=b.dtype)], axis=1)
    a = a.reshape((g, k, CHUNK) + rest)
    b = b.reshape((g, k, CHUNK) + rest)

    # Pass 1: within-chunk inclusive composition M_t = m_1 o ... o m_t.
    ca = np.empty_like(a)
    cb = np.empty_like(b)
    ca[:, :, 0] = a[:, :, 0]
    cb[:, :, 0] = b[:, :, 0]
    for t in range(1, CHUNK):
        ca[:, :, t] = a[:, :, t] * ca[:, :, t - 1]
        cb[:, :, t] = a[:, :, t] * cb[:, :, t - 1] + b[:, :, t]

    # Exclusive scan over chunk summaries (recursing for very long inputs).
    # Only the b-part of the prefix is needed: it is applied to h0 = 0.
    if k > 1:
        sa = ca[:, :, CHUNK - 1]
        sb = cb[:, :, CHUNK - 1]
        if k > CHUNK:
            hs = _affine_scan_chunked(sa, sb)
            pb = np.concatenate([np.zeros((g, 1) + rest, dtype=b.dtype), hs[:, :-1]], axis=1)
        else:
            pb = np.empty_like(sb)
            pb[:, 0] = 0.0
            for j in range(1, k):
                pb[:, j] = sa[:, j - 1] * pb[:, j - 1] + sb[:, j - 1]
        # Pass 2: h = (P_k o M_t)(0) = A_M * b_P + B_M.
        h = ca * pb[:, :, None] + cb
    else:
        h = cb
    h = h.reshape((g, k * CHUNK) + rest)
    return h[:, :length] if pad else h


# ---------------------------------------------------------------------------
# Compiled recurrence kernels (time-major layout, SIMD-friendly inner loop)
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True, parallel=True)
def _scan_mat_fwd(abar, bbar, c, x, h, y, zrow):  # pragma: no cover - compiled
    gg, ll, cc, nn = abar.shape
    for g in prange(gg):
        for t in range(ll):
            hp = h[g, t - 1] if t > 0 else zrow
            for ci in range(cc):
                xv = x[g, t, ci]
                acc = 0.0
                for n in range(nn):
                    hv = abar[g, t, ci, n] * hp[ci, n] + bbar[g, t, ci, n] * xv
                    h[g, t, ci, n] = hv
                    acc += c[g, t, n] * hv
                y[g, t, ci] = acc


@njit(cache=True, fastmath=True, parallel=True)
def _sel_rec_fwd(abar, dt, xt, bt, ct, h, y, zrow):  # pragma: no cover - compiled
    gg, ll, cc, nn = abar.shape
    for g in prange(gg):
        for t in range(ll):
            hp = h[g, t - 1] if t > 0 else zrow
            for c in range(cc):
                dx = dt[g, t, c] * xt[g, t, c]
                acc = 0.0
                for n in range(nn):
                    hv = abar[g, t, c, n] * hp[c, n] + dx * bt[g, t, n]
                    h[g, t, c, n] = hv
                    acc += ct[g, t, n] * hv
                y[g, t, c] = acc


@njit(cache=True, fastmath=True, parallel=True)
def _sel_rec_bwd(abar, dt, xt, bt, ct, a, h, gy,
                 gdt, gbt, gct, ga_per, gxt, lam, zrow):  # pragma: no cover - compiled
    gg, ll, cc, nn = abar.shape
    for g in prange(gg):
        for c in range(cc):
            for n in range(nn):
                lam[g, c, n] = 0.0
        for t in range(ll - 1, -1, -1):
            anext = abar[g, t + 1] if t < ll - 1 else zrow
            hprev = h[g, t - 1] if t > 0 else zrow
            for c in range(cc):
                gyv = gy[g, t, c]
                d = dt[g, t, c]
                xv = xt[g, t, c]
                dx = d * xv
                gd = 0.0
                lb = 0.0
                for n in range(nn):
                    l = gyv * ct[g, t, n] + anext[c, n] * lam[g, c, n]
                    lam[g, c, n] = l
                    lah = l * abar[g, t, c, n] * hprev[c, n]
                    gd += lah * a[c, n]
                    ga_per[g, c, n] += lah * d
                    gbt[g, t, n] += l * dx
                    lb += l * bt[g, t, n]
                    gct[g, t, n] += gyv * h[g, t, c, n]
                gdt[g, t, c] = gd + lb * xv
                gxt[g, t, c] = lb * d


# ---------------------------------------------------------------------------
# Scan operations over explicit discretized parameters
# ---------------------------------------------------------------------------


def _as_batched(arr, want_rank):
    if arr.ndim == want_rank - 1:
        return arr[None], True
    if arr.ndim == want_rank:
        return arr, False
    raise ShapeError(f"expected rank {want_rank - 1} or {want_rank}, got shape {arr.shape}")


def _scan_fwd_seq_np(abar, bbar, c, x, h, y):
    g, ll, cc, nn = abar.shape
    state = np.zeros((g, cc, nn), dtype=x.dtype)
    for t in range(ll):
        state = abar[:, t] * state + bbar[:, t] * x[:, t, :, None]
        h[:, t] = state
        y[:, t] = np.einsum("gn,gcn->gc", c[:, t], state)


def _scan_common(x, d, sequential):
    xb, squeezed = _as_batched(np.ascontiguousarray(x.data), 3)
    abar, _ = _as_batched(np.ascontiguousarray(d.a_bar.data), 4)
    bbar, _ = _as_batched(np.ascontiguousarray(d.b_bar.data), 4)
    c, _ = _as_batched(np.ascontiguousarray(d.c_proj.data), 3)
    g, ll, cc = xb.shape
    nn = abar.shape[-1]
    if abar.shape != (g, ll, cc, nn) or bbar.shape != abar.shape or c.shape != (g, ll, nn):
        raise ShapeError(
            f"scan shapes disagree: x {xb.shape}, A_bar {abar.shape}, "
            f"B_bar {bbar.shape}, C_proj {c.shape}"
        )
    h = np.empty_like(abar)
    y = np.empty_like(xb)
    if sequential:
        if HAVE_NUMBA:
            zrow = np.zeros((cc, nn), dtype=abar.dtype)
            _scan_mat_fwd(abar, bbar, c, xb, h, y, zrow)
        else:
            _scan_fwd_seq_np(abar, bbar, c, xb, h, y)
    else:
        h[:] = _affine_scan_chunked(abar, bbar * xb[..., None])
        np.einsum("gtcn,gtn->gtc", h, c, out=y)
    tape = T._recording(x, d.a_bar, d.b_bar, d.c_proj)
    out = T._out(y[0] if squeezed else y, tape)
    if tape is not None:
        def _bwd():
            gy = out.grad if not squeezed else out.grad[None]
            # Adjoint recurrence lam[t] = gy[t]*c[t] + abar[t+1]*lam[t+1],
            # evaluated as a reversed affine scan with shifted coefficients.
            inj = gy[..., None] * c[:, :, None, :]
            arev = np.concatenate([np.zeros_like(abar[:, :1]), abar[:, :0:-1]], axis=1)
            lam = _affine_scan_chunked(arev, inj[:, ::-1])[:, ::-1]
            gabar = np.zeros_like(lam)
            gabar[:, 1:] = lam[:, 1:] * h[:, :-1]
            gbbar = lam * xb[..., None]
            gx = np.einsum("gtcn,gtcn->gtc", lam, bbar)
            gc = np.einsum("gtc,gtcn->gtn", gy, h)
            T._accum(d.a_bar, gabar[0] if d.a_bar.data.ndim == 3 else gabar, owned=True)
            T._accum(d.b_bar, gbbar[0] if d.b_bar.data.ndim == 3 else gbbar, owned=True)
            T._accum(d.c_proj, gc[0] if d.c_proj.data.ndim == 2 else gc, owned=True)
            T._accum(x, gx[0] if squeezed else gx, owned=True)
        tape.record(out, _bwd)
    return out


def scan_sequential(x, d):
    """Run the recurrence position by position from a zero initial state."""
    return _scan_common(x, d, sequential=True)


def scan_parallel(x, d):
    """Chunked two-pass prefix scan; matches :func:`scan_sequential` up to
    floating-point reassociation."""
    return _scan_common(x, d, sequential=False)


# ---------------------------------------------------------------------------
# Fused selective scan and the block-level entry points
# ---------------------------------------------------------------------------


def _sel_fwd_np(abar, dt, xt, bt, ct, h, y):
    bx = (dt * xt)[..., None] * bt[:, :, None, :]
    h[:] = _affine_scan_chunked(abar, bx)
    np.einsum("gtcn,gtn->gtc", h, ct, out=y)


def _sel_bwd_np(abar, dt, xt, bt, ct, a, h, gy, gdt, gbt, gct, ga, gxt):
    inj = gy[..., None] * ct[:, :, None, :]
    arev = np.concatenate([np.zeros_like(abar[:, :1]), abar[:, :0:-1]], axis=1)
    lam = _affine_scan_chunked(arev, inj[:, ::-1])[:, ::-1]
    lam_ah = np.empty_like(lam)  # lam[t] * A_bar[t] * h[t-1], zero at t = 0
    lam_ah[:, 0] = 0.0
    np.multiply(lam[:, 1:], abar[:, 1:], out=lam_ah[:, 1:])
    lam_ah[:, 1:] *= h[:, :-1]
    lam_b = np.einsum("gtcn,gtn->gtc", lam, bt)
    gdt[:] = np.einsum("gtcn,cn->gtc", lam_ah, a) + lam_b * xt
    ga[:] = np.einsum("gtcn,gtc->cn", lam_ah, dt)
    gbt[:] = np.einsum("gtcn,gtc->gtn", lam, dt * xt)
    gct[:] = np.einsum("gtc,gtcn->gtn", gy, h)
    gxt[:] = lam_b * dt


def fssm_block(x_a, x_b, p, interaction=FULL_INTERACTION):
    """Dual-input scan: ``x_a`` is processed, ``x_b`` drives the parameters.

    ``interaction`` switches each of (B, C, delta) between the partner
    sequence ``x_b`` (True) and the processed sequence itself (False); the
    all-False setting reduces to the single-input block.  Projection,
    discretization, scan and output coupling run as one fused operation;
    batch elements are independent and may execute on parallel workers, with
    the state-matrix gradient reduced in fixed batch order.
    """
    if x_a.shape != x_b.shape:
        raise ShapeError(
            f"dual-input sequences must match: got {x_a.shape} and {x_b.shape}"
        )
    p.validate()
    if x_a.shape[-1] != p.channels:
        raise ShapeError(
            f"sequence has {x_a.shape[-1]} channels, parameters expect {p.channels}"
        )
    use_b, use_c, use_delta = interaction
    xa, squeezed = _as_batched(np.ascontiguousarray(x_a.data), 3)
    xb, _ = _as_batched(np.ascontiguousarray(x_b.data), 3)
    g, ll, cc = xa.shape
    av = np.ascontiguousarray(p.a.data)
    nn = av.shape[1]

    src_b = xb if use_b else xa
    src_c = xb if use_c else xa
    src_d = xb if use_delta else xa
    flat = (g * ll, cc)
    bt = (src_b.reshape(flat) @ p.w_b.data).reshape(g, ll, nn)
    ct = (src_c.reshape(flat) @ p.w_c.data).reshape(g, ll, nn)
    vt = src_d.reshape(flat) @ p.w_delta.data
    vt += p.bias_delta.data
    vt = vt.reshape(g, ll, cc)
    dt = T._np_softplus(vt)
    if not np.all(np.isfinite(dt)):
        raise NumericError("timescale delta is not finite")
    abar = np.exp(dt[..., None] * av)            # (G, L, C, N)
    h = np.empty_like(abar)
    y = np.empty_like(xa)
    zrow = np.zeros((cc, nn), dtype=abar.dtype)
    if HAVE_NUMBA:
        _sel_rec_fwd(abar, dt, xa, bt, ct, h, y, zrow)
    else:
        _sel_fwd_np(abar, dt, xa, bt, ct, h, y)

    tape = T._recording(x_a, x_b, p.a, p.w_b, p.w_c, p.w_delta, p.bias_delta)
    out = T._out(y[0] if squeezed else y, tape)
    if tape is not None:
        def _bwd():
            gy = out.grad if not squeezed else out.grad[None]
            gy = np.ascontiguousarray(gy)
            gdt = np.empty_like(dt)
            gbt = np.zeros_like(bt)
            gct = np.zeros_like(ct)
            gxt = np.empty_like(xa)
            if HAVE_NUMBA:
                ga_per = np.zeros((g, cc, nn), dtype=abar.dtype)
                lam = np.empty((g, cc, nn), dtype=abar.dtype)
                _sel_rec_bwd(abar, dt, xa, bt, ct, av, h, gy,
                             gdt, gbt, gct, ga_per, gxt, lam, zrow)
                ga = ga_per.sum(axis=0)  # fixed batch order
            else:
                ga = np.zeros_like(av)
                _sel_bwd_np(abar, dt, xa, bt, ct, av, h, gy,
                            gdt, gbt, gct, ga, gxt)
            gvt = gdt * T._np_softplus_deriv(vt)
            gvm = gvt.reshape(flat[0], cc)
            gbm = gbt.reshape(flat[0], nn)
            gcm = gct.reshape(flat[0], nn)
            T._accum(p.a, ga, owned=True)
            T._accum(p.w_b, src_b.reshape(flat).T @ gbm, owned=True)
            T._accum(p.w_c, src_c.reshape(flat).T @ gcm, owned=True)
            T._accum(p.w_delta, src_d.reshape(flat).T @ gvm, owned=True)
            T._accum(p.bias_delta, gvm.sum(axis=0), owned=True)
            # Route projection-input gradients to whichever sequence fed them.
            ga_t = gxt
            gb_t = None

            def _route(gsrc, used_partner):
                nonlocal ga_t, gb_t
                if used_partner:
                    gb_t = gsrc if gb_t is None else gb_t + gsrc
                else:
                    ga_t = ga_t + gsrc

            _route((gbm @ p.w_b.data.T).reshape(g, ll, cc), use_b)
            _route((gcm @ p.w_c.data.T).reshape(g, ll, cc), use_c)
            _route((gvm @ p.w_delta.data.T).reshape(g, ll, cc), use_delta)
            T._accum(x_a, ga_t[0] if squeezed else ga_t, owned=True)
            if gb_t is not None:
                T._accum(x_b, gb_t[0] if squeezed else gb_t, owned=True)
        tape.record(out, _bwd)
    return out


def ssm_block(x, p):
    """Single-input scan: parameters derived from the processed sequence."""
    return fssm_block(x, x, p)
