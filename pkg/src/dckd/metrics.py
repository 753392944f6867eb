"""PSNR and SSIM on HWC float images in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ParameterError, StructureError

PSNR_CAP = 100.0
Y_COEFFS = (0.299, 0.587, 0.114)
MODES = ("Y", "RGB")


@dataclass(frozen=True)
class MetricResult:
    psnr_db: float
    ssim: float
    channel_mode: str

    @property
    def psnr_report(self):
        return min(self.psnr_db, PSNR_CAP)


def to_y(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2 or img.shape[-1] == 1:
        return img.reshape(img.shape[:2])
    return img[..., 0] * Y_COEFFS[0] + img[..., 1] * Y_COEFFS[1] + img[..., 2] * Y_COEFFS[2]


def _prepare(a, b, channel_mode):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StructureError(f"image shapes differ: {a.shape} vs {b.shape}")
    if channel_mode not in MODES:
        raise ParameterError(f"channel_mode must be one of {MODES}, got {channel_mode!r}")
    if channel_mode == "Y":
        return to_y(a)[..., None], to_y(b)[..., None]
    if a.ndim == 2:
        return a[..., None], b[..., None]
    return a, b


def psnr(a, b, channel_mode="Y") -> float:
    """Returns ``inf`` for identical inputs; use :data:`PSNR_CAP` when reporting."""
    x, y = _prepare(a, b, channel_mode)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x, y, win, c1, c2):
    def filt(z):
        return convolve2d(z, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, channel_mode="Y", window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    x, y = _prepare(a, b, channel_mode)
    if min(x.shape[:2]) < window:
        raise ParameterError(f"image {x.shape[:2]} is smaller than the {window}x{window} SSIM window")
    win = gaussian_window(window, sigma)
    c1, c2 = k1**2, k2**2
    maps = [_ssim_channel(x[..., c], y[..., c], win, c1, c2) for c in range(x.shape[-1])]
    return float(np.mean(maps))


def evaluate(restored, reference, channel_mode="Y") -> MetricResult:
    restored = np.clip(restored, 0.0, 1.0)
    return MetricResult(psnr(restored, reference, channel_mode), ssim(restored, reference, channel_mode), channel_mode)
