"""Dual-branch fusion network.

Two U-shaped branches extract features from the high-resolution single-band
image and the upsampled low-resolution multi-band image; a combination
branch merges them stage by stage with dual-input fusion blocks; a channel
attention gate driven by a bidirectional sequence block rescales the output
bands; a global residual adds the upsampled input back, so a zero-initialized
head reproduces plain upsampling exactly.

Five stages run at relative spatial scales (1, 1/2, 1/4, 1/2, 1) with
channel widths (C, 2C, 4C, 2C, C); both pyramids can be switched off for
ablation configurations.  Between stages, each of the three lanes passes
through its own resampling convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    BiMambaWeights,
    FourDirMambaWeights,
    FusionMambaWeights,
    bidirectional_mamba,
    four_directional_mamba,
    fusion_mamba_block,
    init_bimamba,
    init_four_directional,
    init_fusion_mamba,
)
from .tensor import ParamStore, ShapeError, Tensor

NUM_STAGES = 5

UPSAMPLE_KINDS = ("shuffle", "bicubic")


@dataclass
class FusionNetConfig:
    """Architecture hyperparameters.

    ``bands`` is the spectral band count S, ``channels`` the base width C,
    ``state_size`` the scan state size N.  The spatial ratio between the two
    inputs is fixed at 4.  The ablation switches remove structure only; they
    never change the wiring of what remains.
    """

    bands: int = 8
    channels: int = 32
    state_size: int = 8
    upsample: str = "shuffle"
    pyramid_widths: bool = True
    multiscale: bool = True
    spatial_branch: bool = True
    spectral_branch: bool = True
    combination_branch: bool = True
    mca: bool = True
    scale: int = field(default=4, init=False)

    def __post_init__(self):
        if self.upsample not in UPSAMPLE_KINDS:
            raise ValueError(f"upsample must be one of {UPSAMPLE_KINDS}, got {self.upsample!r}")
        if min(self.bands, self.channels, self.state_size) < 1:
            raise ValueError("bands, channels and state_size must be positive")

    @property
    def stage_widths(self):
        c = self.channels
        if self.pyramid_widths:
            return (c, 2 * c, 4 * c, 2 * c, c)
        return (c,) * NUM_STAGES

    @property
    def stage_scales(self):
        """Downscale factor of each stage relative to full resolution."""
        return (1, 2, 4, 2, 1) if self.multiscale else (1, 1, 1, 1, 1)

    _BOOL_FIELDS = (
        "pyramid_widths", "multiscale", "spatial_branch",
        "spectral_branch", "combination_branch", "mca",
    )

    def to_manifest(self):
        entries = {
            "bands": self.bands,
            "channels": self.channels,
            "state_size": self.state_size,
            "upsample": self.upsample,
        }
        for name in self._BOOL_FIELDS:
            entries[name] = int(getattr(self, name))
        return entries

    @classmethod
    def from_manifest(cls, entries):
        kwargs = {
            "bands": int(entries["bands"]),
            "channels": int(entries["channels"]),
            "state_size": int(entries["state_size"]),
            "upsample": entries["upsample"],
        }
        for name in cls._BOOL_FIELDS:
            if name in entries:
                kwargs[name] = bool(int(entries[name]))
        return cls(**kwargs)


@dataclass
class McaWeights:
    """Channel attention: pooled bands -> widened sequence -> bidirectional
    scan -> per-band sigmoid gate."""

    w_in: Tensor   # (1, C)
    b_in: Tensor
    bimamba: BiMambaWeights
    w_out: Tensor  # (C, 1)
    b_out: Tensor


@dataclass
class Resampler:
    kind: str
    w: Tensor
    b: Tensor

    def __call__(self, x):
        return T.conv2d_resample(x, self.kind, self.w, self.b)


@dataclass
class StageWeights:
    spatial: FourDirMambaWeights | None
    spectral: FourDirMambaWeights | None
    fusion: FusionMambaWeights


@dataclass
class FusionNet:
    config: FusionNetConfig
    params: ParamStore
    stem_pan: tuple       # (w, b) 3x3 conv 1 -> C
    stem_spec: tuple      # (w, b) 3x3 conv S -> C
    up_in: tuple          # shuffle-kind input upsamplers (empty for bicubic)
    stages: tuple         # NUM_STAGES StageWeights
    transitions: tuple    # NUM_STAGES-1 dicts lane -> Resampler
    mca: McaWeights | None
    head: tuple           # (w, b) 1x1 conv C -> S


def _init_conv3(store, prefix, cin, cout, rng, dtype):
    w = store.add(f"{prefix}.w", T.kaiming_uniform(rng, (3, 3, cin, cout), 9 * cin, dtype))
    b = store.add(f"{prefix}.b", np.zeros(cout, dtype=dtype))
    return w, b


def _init_resampler(store, prefix, kind, cin, cout, rng, dtype):
    wshape, bshape = T.resample_weight_shape(kind, cin, cout)
    fan_in = int(np.prod(wshape[:-1])) if len(wshape) == 4 else wshape[0]
    w = store.add(f"{prefix}.w", T.kaiming_uniform(rng, wshape, fan_in, dtype))
    b = store.add(f"{prefix}.b", np.zeros(bshape, dtype=dtype))
    return Resampler(kind, w, b)


def _init_mca(store, channels, state_size, rng, dtype):
    w_in = store.add("mca.fc_in.w", T.kaiming_uniform(rng, (1, channels), 1, dtype))
    b_in = store.add("mca.fc_in.b", np.zeros(channels, dtype=dtype))
    bimamba = init_bimamba(store, "mca.bimamba", channels, state_size, rng, dtype)
    w_out = store.add("mca.fc_out.w", T.kaiming_uniform(rng, (channels, 1), channels, dtype))
    b_out = store.add("mca.fc_out.b", np.zeros(1, dtype=dtype))
    return McaWeights(w_in, b_in, bimamba, w_out, b_out)


def build_fusion_net(config, seed=0, dtype=np.float32, rng=None):
    """Construct a network with freshly initialized parameters.

    Weights come from a seeded generator (Kaiming-uniform fan-in, zero
    biases), so identical (config, seed) pairs build identical networks.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    store = ParamStore()
    c = config.channels
    s = config.bands
    n = config.state_size
    up_kind = "up_shuffle2" if config.upsample == "shuffle" else "up_bicubic2"

    up_in = ()
    if config.upsample == "shuffle":
        up_in = tuple(
            _init_resampler(store, f"up_in.stage{i}", "up_shuffle2", s, s, rng, dtype)
            for i in (1, 2)
        )
    stem_pan = _init_conv3(store, "stem_pan", 1, c, rng, dtype)
    stem_spec = _init_conv3(store, "stem_spec", s, c, rng, dtype)

    widths = config.stage_widths
    scales = config.stage_scales
    stages = []
    for i in range(NUM_STAGES):
        w = widths[i]
        spatial = (
            init_four_directional(store, f"stage{i + 1}.spatial", w, n, rng, dtype)
            if config.spatial_branch else None
        )
        spectral = (
            init_four_directional(store, f"stage{i + 1}.spectral", w, n, rng, dtype)
            if config.spectral_branch else None
        )
        fusion = init_fusion_mamba(store, f"stage{i + 1}.fusion", w, n, rng, dtype)
        stages.append(StageWeights(spatial, spectral, fusion))

    transitions = []
    lanes = ("a", "b", "c") if config.combination_branch else ("a", "b")
    for i in range(NUM_STAGES - 1):
        if scales[i + 1] > scales[i]:
            kind = "down_stride2"
        elif scales[i + 1] < scales[i]:
            kind = up_kind
        else:
            kind = "same_3x3"
        transitions.append({
            lane: _init_resampler(
                store, f"trans{i + 1}.{lane}", kind, widths[i], widths[i + 1], rng, dtype
            )
            for lane in lanes
        })

    mca = _init_mca(store, c, n, rng, dtype) if config.mca else None
    head_w = store.add("head.w", T.kaiming_uniform(rng, (c, s), c, dtype))
    head_b = store.add("head.b", np.zeros(s, dtype=dtype))

    return FusionNet(
        config=config,
        params=store,
        stem_pan=stem_pan,
        stem_spec=stem_spec,
        up_in=up_in,
        stages=tuple(stages),
        transitions=tuple(transitions),
        mca=mca,
        head=(head_w, head_b),
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def upsample_input(net, m_lr):
    """Lift the low-resolution bands to full resolution (two 2x steps)."""
    if net.config.upsample == "shuffle":
        m = m_lr
        for r in net.up_in:
            m = r(m)
        return m
    return T.bicubic_upsample2(T.bicubic_upsample2(m_lr))


def mca_gate(net, m_up):
    """Per-band attention in (0, 1) from the spatially pooled input bands."""
    w = net.mca
    pooled = T.global_max_pool(m_up)  # (..., 1, 1, S)
    batched = pooled.data.ndim == 4
    s = pooled.shape[-1]
    seq = T.reshape(pooled, (pooled.shape[0], s, 1) if batched else (s, 1))
    seq = T.linear(seq, w.w_in, w.b_in)
    seq = bidirectional_mamba(seq, w.bimamba)
    logits = T.linear(seq, w.w_out, w.b_out)
    gate = T.sigmoid(logits)
    return T.reshape(gate, (gate.shape[0], 1, 1, s) if batched else (1, 1, s))


def _check_inputs(config, pan, m_lr):
    pb = pan.data.ndim == 4
    mb = m_lr.data.ndim == 4
    if pan.data.ndim not in (3, 4) or mb != pb:
        raise ShapeError(
            f"inputs must both be (H, W, C) or both batched; got {pan.shape} and {m_lr.shape}"
        )
    h, w, cp = pan.shape[-3:]
    hl, wl, s = m_lr.shape[-3:]
    if cp != 1:
        raise ShapeError(f"high-resolution input must have one band, got {cp}")
    if h % config.scale or w % config.scale:
        raise ShapeError(f"spatial extents must be divisible by {config.scale}, got {h}x{w}")
    if (hl, wl) != (h // config.scale, w // config.scale):
        raise ShapeError(
            f"low-resolution input must be {h // config.scale}x{w // config.scale}, got {hl}x{wl}"
        )
    if s != config.bands:
        raise ShapeError(f"expected {config.bands} bands, got {s}")
    if pb and pan.shape[0] != m_lr.shape[0]:
        raise ShapeError(f"batch sizes differ: {pan.shape[0]} vs {m_lr.shape[0]}")


def forward(net, pan, m_lr, collect_trace=False):
    """Fuse a single-band high-resolution image with low-resolution bands.

    Accepts ``(H, W, 1)`` + ``(H/4, W/4, S)`` or the same with a leading
    batch axis.  Returns the fused ``(..., H, W, S)`` image; with
    ``collect_trace`` also a dict of per-stage feature shapes.
    """
    cfg = net.config
    _check_inputs(cfg, pan, m_lr)
    m_up = upsample_input(net, m_lr)

    a = T.conv2d_3x3(pan, *net.stem_pan)
    b = T.conv2d_3x3(m_up, *net.stem_spec)
    c = None
    trace = {"stages": []}
    for i, stage in enumerate(net.stages):
        if stage.spatial is not None:
            a = four_directional_mamba(a, stage.spatial)
        if stage.spectral is not None:
            b = four_directional_mamba(b, stage.spectral)
        fused, a, b = fusion_mamba_block(a, b, stage.fusion)
        if cfg.combination_branch and c is not None:
            c = T.add(fused, c)
        else:
            c = fused
        if collect_trace:
            trace["stages"].append({"a": a.shape, "b": b.shape, "c": c.shape})
        if i < NUM_STAGES - 1:
            tr = net.transitions[i]
            a = tr["a"](a)
            b = tr["b"](b)
            if cfg.combination_branch:
                c = tr["c"](c)

    out = T.conv2d_1x1(c, *net.head)
    if cfg.mca:
        out = T.mul(out, mca_gate(net, m_up))
    out = T.add(out, m_up)
    if not np.all(np.isfinite(out.data)):
        raise T.NumericError("network output contains non-finite values")
    if collect_trace:
        trace["m_up"] = m_up.shape
        trace["output"] = out.shape
        return out, trace
    return out


def l1_loss(pred, target):
    """Mean over the batch of the per-sample sum of absolute differences."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    batch = pred.shape[0] if pred.data.ndim == 4 else 1
    diff = T.add(pred, T.scale(target, -1.0))
    return T.scale(T.sum_all(T.abs_val(diff)), 1.0 / batch)


def param_count(net):
    return net.params.total_size()


# ---------------------------------------------------------------------------
# Analytic FLOP accounting
# ---------------------------------------------------------------------------

FLOP_KINDS = ("conv", "bimamba", "fourdir", "fusionmamba", "attention")


def count_flops(kind, height, width, channels, state, params):
    """Analytic floating-point operation count for one block.

    A convolution layer with D parameters costs 2HWD; one selective scan
    costs 9HWCN, and the block variants run 2, 4 and 8 of them.  Attention
    adds the quadratic pairwise term 4H^2W^2C.  Computed in exact (unbounded)
    integer arithmetic, so large configurations cannot overflow.
    """
    h, w, c, n, d = (int(v) for v in (height, width, channels, state, params))
    if min(h, w, c, n, d) <= 0:
        raise ValueError("all FLOP parameters must be positive integers")
    base = 2 * h * w * d
    scan = 9 * h * w * c * n
    if kind == "conv":
        return base
    if kind == "bimamba":
        return base + 2 * scan
    if kind == "fourdir":
        return base + 4 * scan
    if kind == "fusionmamba":
        return base + 8 * scan
    if kind == "attention":
        return base + 4 * h * h * w * w * c
    raise ValueError(f"unknown FLOP kind {kind!r}; valid kinds: {FLOP_KINDS}")
