"""Frozen multi-scale feature encoder and its codebook.

The shipped encoder is a small strided conv net (one tap per resolution)
standing in for a pretrained VQGAN encoder. Both the encoder and the
codebook can be replaced by external weight files, see
:func:`load_external_encoder` and :func:`load_codebook`.

Weight file schema (``.npz``)::

    __manifest__   JSON: {"format": "dckd-encoder", "version": 1,
                          "in_channels": int, "widths": [int, ...],
                          "shapes": {name: [dims...]}}
    <name>         one float array per parameter, e.g. "stages.0.weight"

Codebook file schema (``.npz``)::

    header         int64 array [M, d]
    codebook       float array of shape (M, d)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import LoadError, ShapeError, StructureError

ENCODER_FORMAT = "dckd-encoder"
DEFAULT_WIDTHS = (8, 16, 16, 32, 32)
PROJ_GAIN = 4.0
DEFAULT_LAYER_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)


def default_layer_weights(num_levels: int) -> tuple:
    if num_levels <= len(DEFAULT_LAYER_WEIGHTS):
        return DEFAULT_LAYER_WEIGHTS[-num_levels:]
    extra = tuple(DEFAULT_LAYER_WEIGHTS[0] / 2 ** (k + 1) for k in range(num_levels - 5))
    return extra[::-1] + DEFAULT_LAYER_WEIGHTS


@dataclass
class FeaturePyramid:
    levels: list
    weights: tuple

    def __len__(self):
        return len(self.levels)


class FrozenEncoder(nn.Module):
    """Strided conv pyramid: level 1 at full resolution, each later level halves H and W.

    Inputs in [0, 1] are mapped to [-1, 1] first. The last level gets an
    extra 1x1 projection without activation, so its values are signed like a
    VQ latent.
    """

    def __init__(self, in_channels=3, widths=DEFAULT_WIDTHS, layer_weights=None, seed=0, dtype=torch.float32):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.layer_weights = tuple(layer_weights) if layer_weights is not None else default_layer_weights(len(self.widths))
        if len(self.layer_weights) != len(self.widths):
            raise ValueError("need one layer weight per encoder level")
        chans = (in_channels,) + self.widths
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=1 if i == 0 else 2, padding=1, dtype=dtype)
            for i in range(len(self.widths))
        )
        self.proj = nn.Conv2d(self.widths[-1], self.widths[-1], 1, dtype=dtype)
        self._init(seed)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def _init(self, seed):
        # He-uniform keeps activations O(1) through all stages
        gen = torch.Generator().manual_seed(int(seed))
        for conv in list(self.stages) + [self.proj]:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = np.sqrt(6.0 / fan_in)
            if conv is self.proj:
                # spreads codebook distances to O(1) so a unit-temperature softmax is informative
                bound *= PROJ_GAIN
            conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen, dtype=conv.weight.dtype) * 2 - 1) * bound)
            conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen, dtype=conv.bias.dtype) * 2 - 1) * 0.1)

    @property
    def num_levels(self):
        return len(self.widths)

    @property
    def dim(self):
        return self.widths[-1]

    @property
    def multiple(self):
        return 2 ** (self.num_levels - 1)

    def train(self, mode=True):
        # always inference mode
        return super().train(False)

    def forward(self, img: torch.Tensor) -> FeaturePyramid:
        return self.encode(img)

    def encode(self, img: torch.Tensor) -> FeaturePyramid:
        if img.ndim != 4 or img.shape[1] != self.in_channels:
            raise ShapeError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ShapeError(
                f"spatial dims {h}x{w} must be multiples of {self.multiple} for a {self.num_levels}-level encoder"
            )
        levels = []
        x = img * 2 - 1
        for i, conv in enumerate(self.stages):
            x = F.silu(conv(x))
            levels.append(x)
        levels[-1] = self.proj(levels[-1])
        return FeaturePyramid(levels, self.layer_weights)

    def deepest_features(self, img: torch.Tensor) -> torch.Tensor:
        return self.encode(img).levels[-1]

    def state_arrays(self) -> dict:
        return {n: p.detach().cpu().numpy() for n, p in self.named_parameters()}


def save_encoder(encoder: FrozenEncoder, path):
    arrays = encoder.state_arrays()
    manifest = {
        "format": ENCODER_FORMAT,
        "version": 1,
        "in_channels": encoder.in_channels,
        "widths": list(encoder.widths),
        "layer_weights": list(encoder.layer_weights),
        "shapes": {n: list(a.shape) for n, a in arrays.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.array(json.dumps(manifest)), **arrays)
    return path


def load_external_encoder(path, dtype=None) -> FrozenEncoder:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read encoder file {path}: {exc}") from exc
    with data:
        if "__manifest__" not in data.files:
            raise LoadError(f"{path}: missing __manifest__")
        manifest = json.loads(str(data["__manifest__"]))
        if manifest.get("format") != ENCODER_FORMAT:
            raise LoadError(f"{path}: format is {manifest.get('format')!r}, expected {ENCODER_FORMAT!r}")
        arrays = {k: data[k] for k in data.files if k != "__manifest__"}
    first = next(iter(arrays.values()))
    dtype = dtype or torch.from_numpy(first).dtype
    enc = FrozenEncoder(manifest["in_channels"], manifest["widths"], manifest.get("layer_weights"), dtype=dtype)
    params = dict(enc.named_parameters())
    for name, p in params.items():
        if name not in arrays:
            raise LoadError(f"{path}: missing array {name!r}")
        a = arrays[name]
        if tuple(a.shape) != tuple(p.shape) or list(a.shape) != manifest["shapes"].get(name):
            raise LoadError(f"{path}: array {name!r} has shape {a.shape}, expected {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(a))
    extra = set(arrays) - set(params)
    if extra:
        raise LoadError(f"{path}: unexpected arrays {sorted(extra)}")
    return enc


class Codebook:
    """Fixed set of ``M`` code vectors of dimension ``d``."""

    def __init__(self, entries):
        e = torch.as_tensor(entries)
        if e.ndim != 2 or e.shape[0] < 1:
            raise StructureError(f"codebook must be an (M, d) matrix with M >= 1, got {tuple(e.shape)}")
        if not torch.isfinite(e).all():
            raise StructureError("codebook has non-finite entries")
        if torch.unique(e, dim=0).shape[0] != e.shape[0]:
            raise StructureError("codebook entries must be pairwise distinct")
        self.entries = e

    @property
    def M(self):
        return self.entries.shape[0]

    @property
    def d(self):
        return self.entries.shape[1]

    def to(self, dtype):
        return Codebook(self.entries.to(dtype))


def save_codebook(codebook: Codebook, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    e = codebook.entries.detach().cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(e.shape, dtype=np.int64), codebook=e)
    return path


def load_codebook(path, expected_dim=None) -> Codebook:
    try:
        with np.load(path, allow_pickle=False) as data:
            header, e = data["header"], data["codebook"]
    except (OSError, KeyError, ValueError) as exc:
        raise LoadError(f"cannot read codebook file {path}: {exc}") from exc
    if e.ndim != 2 or tuple(header.tolist()) != e.shape:
        raise LoadError(f"{path}: array 'codebook' has shape {e.shape} but header says {header.tolist()}")
    if expected_dim is not None and e.shape[1] != expected_dim:
        raise LoadError(f"{path}: array 'codebook' has d={e.shape[1]}, encoder produces d={expected_dim}")
    try:
        return Codebook(torch.from_numpy(e))
    except StructureError as exc:
        raise LoadError(f"{path}: array 'codebook': {exc}") from exc


def _asset(name):
    return resources.files("dckd") / "assets" / name


def default_encoder(dtype=torch.float32) -> FrozenEncoder:
    """The version-pinned seed-0 encoder shipped with the package."""
    with resources.as_file(_asset("encoder_v1.npz")) as p:
        return load_external_encoder(p, dtype=dtype)


def default_codebook(dtype=torch.float32) -> Codebook:
    with resources.as_file(_asset("codebook_v1.npz")) as p:
        return load_codebook(p).to(dtype)


def fit_codebook(encoder: FrozenEncoder, images, size=32, seed=0) -> Codebook:
    """k-means over the deepest features of ``images`` (N, C, H, W)."""
    from scipy.cluster.vq import kmeans2

    with torch.no_grad():
        feats = encoder.deepest_features(torch.as_tensor(images, dtype=torch.float32))
    pts = feats.permute(0, 2, 3, 1).reshape(-1, encoder.dim).double().numpy()
    centroids, _ = kmeans2(pts, size, minit="++", seed=seed)
    centroids = np.unique(centroids, axis=0)
    if centroids.shape[0] != size:
        raise StructureError(f"k-means produced only {centroids.shape[0]} distinct codes")
    return Codebook(torch.from_numpy(centroids.astype(np.float32)))
