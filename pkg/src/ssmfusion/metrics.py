"""Reduced-resolution fusion quality indices.

All metrics compare a test image against a reference of the same shape,
channel-last.  ``psnr`` is capped at 99 dB once the mean squared error
drops below 1e-12 so identical images report a finite score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
_EPS = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float   # dB, higher is better
    sam: float    # mean spectral angle in degrees, 0 is ideal
    ergas: float  # dimensionless relative error, 0 is ideal
    ssim: float   # structural similarity in [-1, 1], 1 is ideal

    def as_line(self):
        return (
            f"psnr={self.psnr:.3f} sam={self.sam:.3f} "
            f"ergas={self.ergas:.3f} ssim={self.ssim:.3f}"
        )


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB against reference ``b``."""
    a, b = _check(a, b)
    mse = np.mean((a - b) ** 2)
    if mse < _EPS:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / mse))


def sam(a, b):
    """Mean per-pixel spectral angle (degrees) between test and reference."""
    a, b = _check(a, b)
    va = a.reshape(-1, a.shape[-1])
    vb = b.reshape(-1, b.shape[-1])
    num = np.sum(va * vb, axis=1)
    den = np.sqrt(np.sum(va * va, axis=1) * np.sum(vb * vb, axis=1))
    cos = np.clip(num / np.maximum(den, _EPS), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def ergas(a, b, ratio=4):
    """Relative global dimensional synthesis error.

    ``100/ratio * sqrt(mean_b(RMSE_b^2 / mu_b^2))`` with ``mu_b`` the
    reference band means; near-zero band means are floored at 1e-12 and
    logged.
    """
    a, b = _check(a, b)
    va = a.reshape(-1, a.shape[-1])
    vb = b.reshape(-1, b.shape[-1])
    mse_b = np.mean((va - vb) ** 2, axis=0)
    mu_b = vb.mean(axis=0)
    tiny = np.abs(mu_b) < _EPS
    if tiny.any():
        log.warning("ergas: %d band(s) have near-zero mean; flooring at %g", tiny.sum(), _EPS)
        mu_b = np.where(tiny, _EPS, mu_b)
    return float(100.0 / ratio * np.sqrt(np.mean(mse_b / mu_b**2)))


def _gaussian_window():
    half = SSIM_WINDOW // 2
    g = np.exp(-0.5 * (np.arange(-half, half + 1) / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _windowed(img, win):
    # Separable valid-mode filtering over the two leading (spatial) axes.
    from scipy.ndimage import correlate1d

    half = SSIM_WINDOW // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a, b, peak=1.0):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Multi-band images score each band separately and average.  Statistics
    use valid windows only, so images must be at least 11x11.
    """
    a, b = _check(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {a.shape}")
    win = _gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    scores = []
    for band in range(a.shape[-1]):
        x = a[:, :, band]
        y = b[:, :, band]
        mx = _windowed(x, win)
        my = _windowed(y, win)
        mxx = _windowed(x * x, win)
        myy = _windowed(y * y, win)
        mxy = _windowed(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def evaluate(a, b, peak=1.0, ratio=4):
    """All four indices of ``a`` against reference ``b`` as a report."""
    return MetricReport(
        psnr=psnr(a, b, peak=peak),
        sam=sam(a, b),
        ergas=ergas(a, b, ratio=ratio),
        ssim=ssim(a, b, peak=peak),
    )
