"""Synthetic restoration corpus, LQ/GT pairing and patch sampling.

Images here are HWC ``float32`` numpy arrays in [0, 1]; :func:`to_tensor`
converts stacks of them into NCHW tensors for the models.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .errors import ParameterError, ShapeError

CORPUS_FORMAT = "dckd-corpus"


@dataclass
class PairedSample:
    lq: np.ndarray
    gt: np.ndarray
    record: dict = field(default_factory=dict)

    @property
    def scale(self):
        return self.gt.shape[0] // self.lq.shape[0]


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    return y, x


def _gradient(rng, size):
    y, x = _grid(size)
    a = rng.uniform(0, 2 * np.pi)
    return (np.cos(a) * x + np.sin(a) * y + 1.5) / 3.0


def _checker(rng, size):
    y, x = np.mgrid[0:size, 0:size]
    cell = int(rng.integers(2, 9))
    return (((x // cell) + (y // cell)) % 2).astype(np.float64)


def _stripes(rng, size):
    y, x = _grid(size)
    a = rng.uniform(0, np.pi)
    freq = rng.uniform(3, 14)
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(a) * x + np.sin(a) * y) + rng.uniform(0, 2 * np.pi))


def _blobs(rng, size):
    y, x = _grid(size)
    out = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.04, 0.2)
        out += rng.uniform(0.4, 1.0) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s**2))
    return out


def _smooth_field(rng, size):
    f = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(1.5, 6.0), mode="wrap")
    return f


PATTERNS = (_gradient, _checker, _stripes, _blobs, _smooth_field)


def _normalize(a):
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.full_like(a, 0.5)


def make_toy_corpus(seed: int, count: int, size: int = 64, channels: int = 3) -> list:
    """Procedural images mixing smooth and high-frequency content.

    Values are quantized to multiples of 1/255 so the corpus survives an
    8-bit PNG round trip exactly.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(count):
        picks = rng.choice(len(PATTERNS), size=int(rng.integers(2, 4)), replace=False)
        img = np.zeros((size, size, channels))
        for p in picks:
            layer = _normalize(PATTERNS[p](rng, size))
            tint = rng.uniform(0.2, 1.0, channels)
            img += layer[..., None] * tint * rng.uniform(0.5, 1.0)
        img = _normalize(img) * rng.uniform(0.7, 1.0) + rng.uniform(0, 0.15)
        images.append((np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32))
    return images


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_numpy(tensor: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> NHWC float array."""
    return tensor.detach().cpu().numpy().transpose(0, 2, 3, 1)


def bilinear_downsample(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    t = to_tensor(img, torch.float64)
    out = F.interpolate(t, size=(h // scale, w // scale), mode="bilinear", align_corners=False)
    return to_numpy(out)[0].astype(img.dtype)


def synth_pair(gt: np.ndarray, scale: int) -> PairedSample:
    h, w = gt.shape[:2]
    if scale < 1 or h % scale or w % scale:
        raise ShapeError(f"gt dims {h}x{w} are not divisible by scale {scale}")
    lq = gt.copy() if scale == 1 else bilinear_downsample(gt, scale)
    return PairedSample(lq, gt, {"op": "bilinear_downsample", "scale": scale})


def hflip(img):
    return img[:, ::-1]


def vflip(img):
    return img[::-1]


def transpose(img):
    return img.transpose(1, 0, 2)


def crop_augment(sample: PairedSample, patch: int, rng: np.random.Generator, augment: bool = True) -> PairedSample:
    """Aligned random crop (``patch`` in LQ pixels) plus shared flips/transpose."""
    r = sample.scale
    h, w = sample.lq.shape[:2]
    if patch > h or patch > w:
        raise ParameterError(f"patch {patch} is larger than the LQ image {h}x{w}")
    top, left = int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))
    lq = sample.lq[top:top + patch, left:left + patch]
    gt = sample.gt[r * top:r * (top + patch), r * left:r * (left + patch)]
    flips = tuple(bool(b) for b in rng.integers(0, 2, 3)) if augment else (False, False, False)
    for do, op in zip(flips, (hflip, vflip, transpose)):
        if do:
            lq, gt = op(lq), op(gt)
    record = dict(sample.record, crop=(top, left, patch), hflip=flips[0], vflip=flips[1], transpose=flips[2])
    return PairedSample(np.ascontiguousarray(lq), np.ascontiguousarray(gt), record)


def sample_batch(pairs, batch_size, patch, rng, augment=True, dtype=torch.float32):
    idx = rng.integers(len(pairs), size=batch_size)
    crops = [crop_augment(pairs[i], patch, rng, augment) for i in idx]
    return to_tensor([c.lq for c in crops], dtype), to_tensor([c.gt for c in crops], dtype)


def save_corpus(images, directory, meta=None) -> Path:
    """PNG files plus ``manifest.json``; lossless for 1/255-quantized images."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"img_{i:04d}.png"
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(directory / name)
        names.append(name)
    manifest = {"format": CORPUS_FORMAT, "version": 1, "files": names, "shape": list(images[0].shape), **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_corpus(directory) -> list:
    from PIL import Image

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [(np.asarray(Image.open(directory / n), dtype=np.float64) / 255.0).astype(np.float32) for n in manifest["files"]]
