"""Selective state-space image fusion toolkit.

A self-contained numpy implementation of scan-based sequence blocks and the
dual-branch fusion network built from them, with reverse-mode gradients,
synthetic data generation under a degrade-then-fuse protocol, quality
metrics, and a deterministic training loop.
"""

from .tensor import (
    GradTape,
    NumericError,
    ParamStore,
    ShapeError,
    Tensor,
    UsageError,
    activation,
    backward,
    conv2d_1x1,
    conv2d_resample,
    global_max_pool,
    layer_norm,
    linear,
)
from .ssm import (
    DiscretizedSsm,
    ScanState,
    SsmParams,
    fssm_block,
    generate_and_discretize,
    scan_parallel,
    scan_sequential,
    ssm_block,
)
from .blocks import (
    BiMambaWeights,
    FourDirMambaWeights,
    FusionMambaWeights,
    bidirectional_mamba,
    flatten_direction,
    four_directional_mamba,
    fusion_mamba_block,
    unflatten_direction,
)

__version__ = "0.1.0"
