"""Random corruption operators fed to the history model to build negatives.

Operators act on NCHW tensors in [0, 1] and clamp their output back into
that range, so they compose freely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError

KINDS = ("blur", "noise", "resize")
POLICIES = KINDS + ("mix",)
DEFAULT_POLICY = "noise"


@dataclass(frozen=True)
class DegradationRanges:
    blur: tuple = (0.5, 2.0)
    noise: tuple = (5 / 255, 30 / 255)
    resize: tuple = (0.5, 0.9)

    def of(self, kind):
        return getattr(self, kind)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    value: float  # blur sigma (px), noise sigma (intensity) or resize scale
    seed: int = 0


def gaussian_kernel1d(sigma: float, dtype=torch.float64) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def apply_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    if not sigma > 0:
        raise ParameterError(f"blur sigma must be > 0, got {sigma}")
    n, c, h, w = img.shape
    k = gaussian_kernel1d(sigma, dtype=img.dtype).to(img.device)
    r = k.numel() // 2
    # reflect padding needs pad < dim
    mode = "reflect" if r < h and r < w else "replicate"
    x = F.pad(img.reshape(n * c, 1, h, w), (r, r, r, r), mode=mode)
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    return x.reshape(n, c, h, w).clamp(0, 1)


def apply_noise(img: torch.Tensor, sigma: float, rng: torch.Generator) -> torch.Tensor:
    if sigma < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.clone()
    g = torch.randn(img.shape, generator=rng, dtype=img.dtype)
    return (img + sigma * g).clamp(0, 1)


def apply_resize(img: torch.Tensor, scale: float) -> torch.Tensor:
    if not 0 < scale < 1:
        raise ParameterError(f"resize scale must lie in (0, 1), got {scale}")
    h, w = img.shape[-2:]
    size = (math.floor(scale * h), math.floor(scale * w))
    if min(size) < 1:
        raise ParameterError(f"scale {scale} shrinks a {h}x{w} image below 1 pixel")
    # sampling positions follow the exact scale, so nearby scales with equal floor sizes still differ
    small = F.interpolate(img, scale_factor=scale, mode="bilinear", align_corners=False,
                          recompute_scale_factor=False)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)


def apply_spec(img: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
    if spec.kind == "blur":
        return apply_blur(img, spec.value)
    if spec.kind == "noise":
        return apply_noise(img, spec.value, torch.Generator().manual_seed(spec.seed))
    if spec.kind == "resize":
        return apply_resize(img, spec.value)
    raise ParameterError(f"unknown degradation kind {spec.kind!r}")


def sample_spec(policy: str, rng: np.random.Generator, ranges: DegradationRanges = DegradationRanges()) -> DegradationSpec:
    """Draw one operator. ``mix`` picks one kind uniformly, it does not stack them."""
    if policy not in POLICIES:
        raise ParameterError(f"unknown degradation policy {policy!r}; choose from {POLICIES}")
    kind = KINDS[rng.integers(len(KINDS))] if policy == "mix" else policy
    lo, hi = ranges.of(kind)
    return DegradationSpec(kind, float(rng.uniform(lo, hi)), int(rng.integers(2**31 - 1)))
