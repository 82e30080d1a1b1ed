"""Synthetic degrade-then-fuse training data.

Ground-truth multi-band images are built from band-correlated smooth
textures (low-pass filtered noise mixed through a random spectral basis),
random illumination gradients and sharp rectangles that inject edges.  The
low-resolution input is the ground truth blurred with a fixed 5x5 Gaussian
(sigma 1.0) and decimated by 4; the single-band input is a weighted band
average whose weights are jittered once per dataset.  The original image
then serves as its own fusion reference.

Generation is pure and deterministic: sample ``i`` of a dataset seeded with
``seed`` depends only on ``seed ^ i`` (plus dataset-level band weights), so
samples can be produced independently and in any order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fmt

SCALE = 4

BLUR_SIGMA = 1.0
BLUR_TAPS = 5


@dataclass
class SamplePair:
    """One (single-band, low-res bands, reference) triplet, all in [0, 1]."""

    pan: np.ndarray  # (H, W, 1)
    lr: np.ndarray   # (H/4, W/4, S)
    gt: np.ndarray   # (H, W, S)

    def validate(self):
        h, w, _ = self.pan.shape
        if self.lr.shape[:2] != (h // SCALE, w // SCALE):
            raise ValueError(f"low-res spatial size {self.lr.shape[:2]} is not 1/{SCALE} of {h}x{w}")
        if self.gt.shape != (h, w, self.lr.shape[2]):
            raise ValueError(f"reference shape {self.gt.shape} does not match inputs")
        for name, arr in (("pan", self.pan), ("lr", self.lr), ("gt", self.gt)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values leave [0, 1]")


def blur_kernel():
    """Normalized 5-tap Gaussian (sigma 1.0) used for the degradation blur."""
    half = BLUR_TAPS // 2
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / BLUR_SIGMA) ** 2)
    return k / k.sum()


def blur_and_decimate(gt):
    """Wald-style degradation: separable 5x5 Gaussian blur then 4x decimation."""
    k = blur_kernel()
    low = ndimage.correlate1d(gt, k, axis=0, mode="reflect")
    low = ndimage.correlate1d(low, k, axis=1, mode="reflect")
    # Sample near the centre of each 4x4 block.
    return np.ascontiguousarray(low[1::SCALE, 1::SCALE, :])


def pan_weights(rng, bands):
    """Uniform 1/S band weights with one-off +-10% jitter, renormalized."""
    w = (1.0 + rng.uniform(-0.1, 0.1, size=bands)) / bands
    return w / w.sum()


def _sample_gt(rng, height, width, bands):
    n_latent = 3
    latents = []
    for _ in range(n_latent):
        z = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=6.0)
        lo, hi = z.min(), z.max()
        latents.append((z - lo) / (hi - lo + 1e-12))
    latents = np.stack(latents, axis=-1)  # (H, W, K)

    mix = rng.uniform(0.2, 1.0, size=(bands, n_latent))
    mix /= mix.sum(axis=1, keepdims=True)
    gt = latents @ mix.T  # (H, W, S), band-correlated textures

    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    plane = gx * xx + gy * yy
    gt += plane[:, :, None] * rng.uniform(0.5, 1.0, size=bands)

    for _ in range(int(rng.integers(4, 9))):
        y0 = int(rng.integers(0, height - 4))
        x0 = int(rng.integers(0, width - 4))
        y1 = int(rng.integers(y0 + 3, min(y0 + height // 2, height)))
        x1 = int(rng.integers(x0 + 3, min(x0 + width // 2, width)))
        amp = rng.uniform(-0.5, 0.5) * rng.uniform(0.7, 1.3, size=bands)
        gt[y0:y1, x0:x1, :] += amp

    lo = gt.min()
    hi = gt.max()
    gt = (gt - lo) / (hi - lo + 1e-12) * 0.9 + 0.05
    return gt.astype(np.float32)


def generate_synthetic(seed, count, height, width, bands):
    """Produce ``count`` deterministic sample triplets.

    Regenerating with the same arguments is bit-identical; the band-average
    weights for the single-band image are drawn once per dataset.
    """
    if height % SCALE or width % SCALE:
        raise ValueError(f"height and width must be divisible by {SCALE}, got {height}x{width}")
    weights = pan_weights(np.random.default_rng(seed), bands)
    samples = []
    for i in range(count):
        rng = np.random.default_rng(seed ^ i)
        gt = _sample_gt(rng, height, width, bands)
        lr = blur_and_decimate(gt).astype(np.float32)
        pan = (gt @ weights).astype(np.float32)[:, :, None]
        pair = SamplePair(pan=pan, lr=lr, gt=gt)
        pair.validate()
        samples.append(pair)
    return samples, weights


# ---------------------------------------------------------------------------
# On-disk dataset layout
# ---------------------------------------------------------------------------


def save_dataset(directory, samples, manifest_entries):
    """Write ``pan_#####.fmt`` / ``lr_#####.fmt`` / ``gt_#####.fmt`` plus the
    ``dataset.manifest`` key=value index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        fmt.write_tensor(directory / f"pan_{i:05d}.fmt", s.pan)
        fmt.write_tensor(directory / f"lr_{i:05d}.fmt", s.lr)
        fmt.write_tensor(directory / f"gt_{i:05d}.fmt", s.gt)
    fmt.write_manifest(directory / "dataset.manifest", manifest_entries)


def generate_and_save(directory, seed, count, height, width, bands):
    samples, weights = generate_synthetic(seed, count, height, width, bands)
    manifest = {
        "seed": seed,
        "count": count,
        "H": height,
        "W": width,
        "S": bands,
        "pan_weights": ",".join(repr(float(w)) for w in weights),
    }
    save_dataset(directory, samples, manifest)
    return samples


def load_dataset(directory):
    """Read a dataset directory back into sample triplets plus its manifest."""
    directory = Path(directory)
    manifest = fmt.read_manifest(directory / "dataset.manifest")
    count = int(manifest["count"])
    samples = []
    for i in range(count):
        pair = SamplePair(
            pan=fmt.read_tensor(directory / f"pan_{i:05d}.fmt"),
            lr=fmt.read_tensor(directory / f"lr_{i:05d}.fmt"),
            gt=fmt.read_tensor(directory / f"gt_{i:05d}.fmt"),
        )
        pair.validate()
        samples.append(pair)
    return samples, manifest
