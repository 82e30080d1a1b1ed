"""Mamba-style blocks built on the scan kernels.

Three variants share one pattern -- normalize, project into a value stream
and a gate stream, scan the value stream, gate with SiLU, project out, add
the residual:

* :func:`bidirectional_mamba` scans a 1D sequence forward and backward,
* :func:`four_directional_mamba` scans a 2D feature map along four spatial
  serialization orders,
* :func:`fusion_mamba_block` runs two symmetric four-directional halves on
  a pair of feature maps, with each half's scans parameterized by the other
  map's sequences (eight dual-input scans in total).

All blocks are exact identities on the residual path when their output
projection is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ssm import FULL_INTERACTION, SsmParams, fssm_block, init_ssm_params, ssm_block
from .tensor import ShapeError, Tensor

LAYER_NORM_EPS = 1e-5

DIRECTIONS = (1, 2, 3, 4)


# ---------------------------------------------------------------------------
# Flattening directions
# ---------------------------------------------------------------------------


def flatten_direction(x, direction):
    """Serialize ``(..., H, W, C)`` into ``(..., H*W, C)`` along a direction.

    1: row-major, top-left to bottom-right;  2: reverse of 1;
    3: column-major, top-left to bottom-right;  4: reverse of 3.
    """
    if x.data.ndim == 3:
        h, w, c = x.shape
        lead = ()
    elif x.data.ndim == 4:
        b, h, w, c = x.shape
        lead = (b,)
    else:
        raise ShapeError(f"expected an (H, W, C) or (B, H, W, C) map, got {x.shape}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 1..4, got {direction}")
    if direction >= 3:
        x = T.swap_spatial(x)
    seq = T.reshape(x, lead + (h * w, c))
    if direction in (2, 4):
        seq = T.flip_rows(seq)
    return seq


def unflatten_direction(y, direction, height, width):
    """Invert :func:`flatten_direction` back to ``(..., H, W, C)``."""
    if y.data.ndim == 2:
        lead = ()
    elif y.data.ndim == 3:
        lead = (y.shape[0],)
    else:
        raise ShapeError(f"expected an (L, C) or (B, L, C) sequence, got {y.shape}")
    if y.shape[-2] != height * width:
        raise ShapeError(f"sequence length {y.shape[-2]} is not {height}x{width}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 1..4, got {direction}")
    if direction in (2, 4):
        y = T.flip_rows(y)
    if direction >= 3:
        x = T.reshape(y, lead + (width, height, y.shape[-1]))
        return T.swap_spatial(x)
    return T.reshape(y, lead + (height, width, y.shape[-1]))


# ---------------------------------------------------------------------------
# Weight bundles
# ---------------------------------------------------------------------------


@dataclass
class BiMambaWeights:
    gamma: Tensor
    beta: Tensor
    w_x: Tensor
    b_x: Tensor
    w_z: Tensor
    b_z: Tensor
    ssm_fwd: SsmParams
    ssm_bwd: SsmParams
    w_o: Tensor
    b_o: Tensor


@dataclass
class FourDirMambaWeights:
    gamma: Tensor
    beta: Tensor
    w_x: Tensor
    b_x: Tensor
    w_z: Tensor
    b_z: Tensor
    ssm: tuple  # four independent SsmParams, one per direction
    w_o: Tensor
    b_o: Tensor


@dataclass
class FusionMambaWeights:
    """Two symmetric halves (a, b) plus the shared combining projection.

    ``fssm_a[i]`` parameterizes the lane that processes the a-side sequence
    of direction ``i`` with b-side parameters, and vice versa: eight scan
    parameter sets in total.
    """

    norm_a: tuple  # (gamma, beta)
    norm_b: tuple
    w_x_a: Tensor
    b_x_a: Tensor
    w_z_a: Tensor
    b_z_a: Tensor
    w_x_b: Tensor
    b_x_b: Tensor
    w_z_b: Tensor
    b_z_b: Tensor
    fssm_a: tuple  # four SsmParams
    fssm_b: tuple
    w_o_a: Tensor
    b_o_a: Tensor
    w_o_b: Tensor
    b_o_b: Tensor
    w_o: Tensor
    b_o: Tensor
    interaction: tuple = field(default=FULL_INTERACTION)


# Output projections start 10x smaller than Kaiming so each block is
# near-identity at init; with five cascaded residual stages, unit-gain
# output projections compound into activations orders of magnitude above
# the inputs and training stalls repairing the scale.
OUT_PROJ_GAIN = 0.1


def _init_proj(store, prefix, cin, cout, rng, dtype, gain=1.0):
    w = store.add(f"{prefix}.w", gain * T.kaiming_uniform(rng, (cin, cout), cin, dtype))
    b = store.add(f"{prefix}.b", np.zeros(cout, dtype=dtype))
    return w, b


def _init_norm(store, prefix, channels, dtype):
    gamma = store.add(f"{prefix}.gamma", np.ones(channels, dtype=dtype))
    beta = store.add(f"{prefix}.beta", np.zeros(channels, dtype=dtype))
    return gamma, beta


def init_bimamba(store, prefix, channels, state_size, rng, dtype=np.float32):
    gamma, beta = _init_norm(store, f"{prefix}.norm", channels, dtype)
    w_x, b_x = _init_proj(store, f"{prefix}.proj_x", channels, channels, rng, dtype)
    w_z, b_z = _init_proj(store, f"{prefix}.proj_z", channels, channels, rng, dtype)
    ssm_fwd = init_ssm_params(store, f"{prefix}.ssm_fwd", channels, state_size, rng, dtype)
    ssm_bwd = init_ssm_params(store, f"{prefix}.ssm_bwd", channels, state_size, rng, dtype)
    w_o, b_o = _init_proj(store, f"{prefix}.proj_o", channels, channels, rng, dtype, OUT_PROJ_GAIN)
    return BiMambaWeights(gamma, beta, w_x, b_x, w_z, b_z, ssm_fwd, ssm_bwd, w_o, b_o)


def init_four_directional(store, prefix, channels, state_size, rng, dtype=np.float32):
    gamma, beta = _init_norm(store, f"{prefix}.norm", channels, dtype)
    w_x, b_x = _init_proj(store, f"{prefix}.conv_x", channels, channels, rng, dtype)
    w_z, b_z = _init_proj(store, f"{prefix}.conv_z", channels, channels, rng, dtype)
    ssm = tuple(
        init_ssm_params(store, f"{prefix}.ssm{i}", channels, state_size, rng, dtype)
        for i in DIRECTIONS
    )
    w_o, b_o = _init_proj(store, f"{prefix}.conv_o", channels, channels, rng, dtype, OUT_PROJ_GAIN)
    return FourDirMambaWeights(gamma, beta, w_x, b_x, w_z, b_z, ssm, w_o, b_o)


def init_fusion_mamba(store, prefix, channels, state_size, rng, dtype=np.float32,
                      interaction=FULL_INTERACTION):
    norm_a = _init_norm(store, f"{prefix}.norm_a", channels, dtype)
    norm_b = _init_norm(store, f"{prefix}.norm_b", channels, dtype)
    w_x_a, b_x_a = _init_proj(store, f"{prefix}.conv_x_a", channels, channels, rng, dtype)
    w_z_a, b_z_a = _init_proj(store, f"{prefix}.conv_z_a", channels, channels, rng, dtype)
    w_x_b, b_x_b = _init_proj(store, f"{prefix}.conv_x_b", channels, channels, rng, dtype)
    w_z_b, b_z_b = _init_proj(store, f"{prefix}.conv_z_b", channels, channels, rng, dtype)
    fssm_a = tuple(
        init_ssm_params(store, f"{prefix}.fssm_a{i}", channels, state_size, rng, dtype)
        for i in DIRECTIONS
    )
    fssm_b = tuple(
        init_ssm_params(store, f"{prefix}.fssm_b{i}", channels, state_size, rng, dtype)
        for i in DIRECTIONS
    )
    w_o_a, b_o_a = _init_proj(store, f"{prefix}.conv_o_a", channels, channels, rng, dtype, OUT_PROJ_GAIN)
    w_o_b, b_o_b = _init_proj(store, f"{prefix}.conv_o_b", channels, channels, rng, dtype, OUT_PROJ_GAIN)
    w_o, b_o = _init_proj(store, f"{prefix}.conv_o", channels, channels, rng, dtype)
    return FusionMambaWeights(
        norm_a, norm_b,
        w_x_a, b_x_a, w_z_a, b_z_a, w_x_b, b_x_b, w_z_b, b_z_b,
        fssm_a, fssm_b,
        w_o_a, b_o_a, w_o_b, b_o_b, w_o, b_o,
        interaction=interaction,
    )


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def bidirectional_mamba(x_in, w):
    """Sequence block scanning forward and backward lanes.

    ``out = Linear_o((SSM_f(x) + VFlip(SSM_b(VFlip(x)))) * SiLU(z)) + x_in``
    where x and z are two projections of the layer-normalized input.
    """
    xn = T.layer_norm(x_in, w.gamma, w.beta, LAYER_NORM_EPS)
    x = T.linear(xn, w.w_x, w.b_x)
    z = T.linear(xn, w.w_z, w.b_z)
    y_fwd = ssm_block(x, w.ssm_fwd)
    y_bwd = ssm_block(T.flip_rows(x), w.ssm_bwd)
    y = T.add(y_fwd, T.flip_rows(y_bwd))
    gated = T.mul(y, T.silu(z))
    return T.add(T.linear(gated, w.w_o, w.b_o), x_in)


def _spatial_dims(x):
    if x.data.ndim == 3:
        return x.shape[0], x.shape[1]
    if x.data.ndim == 4:
        return x.shape[1], x.shape[2]
    raise ShapeError(f"expected an (H, W, C) or (B, H, W, C) map, got {x.shape}")


def four_directional_mamba(f_in, w):
    """2D block scanning the four directional serializations of the map.

    Direction lanes are independent; their unflattened outputs are summed in
    fixed order 1, 2, 3, 4 before gating and the output convolution.
    """
    h, wd = _spatial_dims(f_in)
    fn = T.layer_norm(f_in, w.gamma, w.beta, LAYER_NORM_EPS)
    x = T.conv2d_1x1(fn, w.w_x, w.b_x)
    z = T.conv2d_1x1(fn, w.w_z, w.b_z)
    y = None
    for i, p in zip(DIRECTIONS, w.ssm):
        yi = ssm_block(flatten_direction(x, i), p)
        yi = unflatten_direction(yi, i, h, wd)
        y = yi if y is None else T.add(y, yi)
    gated = T.mul(y, T.silu(z))
    return T.add(T.conv2d_1x1(gated, w.w_o, w.b_o), f_in)


def fusion_mamba_block(f_a, f_b, w):
    """Dual-input block merging two same-shape feature maps.

    For each direction, the a-lane scans the a-side sequence with parameters
    generated from the b-side sequence and vice versa.  Returns the combined
    map plus both per-side outputs (each carrying its own residual).
    """
    if f_a.shape != f_b.shape:
        raise ShapeError(
            f"fusion inputs must share a shape: got {f_a.shape} and {f_b.shape}"
        )
    h, wd = _spatial_dims(f_a)
    na = T.layer_norm(f_a, *w.norm_a, LAYER_NORM_EPS)
    nb = T.layer_norm(f_b, *w.norm_b, LAYER_NORM_EPS)
    x_a = T.conv2d_1x1(na, w.w_x_a, w.b_x_a)
    z_a = T.conv2d_1x1(na, w.w_z_a, w.b_z_a)
    x_b = T.conv2d_1x1(nb, w.w_x_b, w.b_x_b)
    z_b = T.conv2d_1x1(nb, w.w_z_b, w.b_z_b)
    y_a = None
    y_b = None
    for i, pa, pb in zip(DIRECTIONS, w.fssm_a, w.fssm_b):
        sa = flatten_direction(x_a, i)
        sb = flatten_direction(x_b, i)
        ya = unflatten_direction(fssm_block(sa, sb, pa, w.interaction), i, h, wd)
        yb = unflatten_direction(fssm_block(sb, sa, pb, w.interaction), i, h, wd)
        y_a = ya if y_a is None else T.add(y_a, ya)
        y_b = yb if y_b is None else T.add(y_b, yb)
    out_a = T.add(T.conv2d_1x1(T.mul(y_a, T.silu(z_a)), w.w_o_a, w.b_o_a), f_a)
    out_b = T.add(T.conv2d_1x1(T.mul(y_b, T.silu(z_b)), w.w_o_b, w.b_o_b), f_b)
    fused = T.conv2d_1x1(T.add(out_a, out_b), w.w_o, w.b_o)
    return fused, out_a, out_b
