"""Toy restoration networks used as teacher, student and history model.

All models take and return NCHW tensors. Parameters are addressed through
:class:`ParamVector` so that snapshotting and EMA blending never depend on the
concrete architecture.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import LoadError, ShapeError, StructureError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture of a :class:`RestorationModel`.

    ``depth`` counts convolution layers. ``depth=0`` is a pass-through model
    (bilinear upsampling when ``upscale > 1``), ``depth=1`` a single conv
    followed by pixel shuffle. ``residual`` adds a bilinear upsample of the
    input to the output.
    """

    channels: int = 3
    width: int = 8
    depth: int = 2
    upscale: int = 2
    kernel_size: int = 3
    residual: bool = False

    def __post_init__(self):
        for key in ("channels", "width", "upscale", "kernel_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be a positive integer")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")


TEACHER_ARCH = ArchSpec(width=32, depth=4)
STUDENT_ARCH = ArchSpec(width=8, depth=2)


def _layer_dims(spec: ArchSpec):
    c, w, r2 = spec.channels, spec.width, spec.upscale**2
    if spec.depth == 0:
        return []
    if spec.depth == 1:
        return [(c, c * r2)]
    return [(c, w)] + [(w, w)] * (spec.depth - 2) + [(w, c * r2)]


def param_count(spec: ArchSpec) -> int:
    k2 = spec.kernel_size**2
    return sum(cin * cout * k2 + cout for cin, cout in _layer_dims(spec))


class RestorationModel(nn.Module):
    """Conv stack + pixel shuffle, optionally added to a bilinear upsample of the input."""

    def __init__(self, spec: ArchSpec, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        self.trainable = True
        pad = spec.kernel_size // 2
        self.layers = nn.ModuleList(
            nn.Conv2d(cin, cout, spec.kernel_size, padding=pad, dtype=dtype)
            for cin, cout in _layer_dims(spec)
        )
        self.shuffle = nn.PixelShuffle(spec.upscale)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for conv in self.layers:
            bound = 1.0 / np.sqrt(conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1])
            conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen, dtype=conv.weight.dtype) * 2 * bound - bound)
            conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen, dtype=conv.bias.dtype) * 2 * bound - bound)

    def _skip(self, x):
        if self.spec.upscale == 1:
            return x
        return F.interpolate(x, scale_factor=self.spec.upscale, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(
                f"expected input of shape (N, {self.spec.channels}, H, W), got {tuple(x.shape)}"
            )
        if not self.layers:
            return self._skip(x)
        h = x
        for i, conv in enumerate(self.layers):
            h = conv(h)
            if i < len(self.layers) - 1:
                h = F.relu(h)
        h = self.shuffle(h)
        if self.spec.residual:
            h = h + self._skip(x)
        return h


@dataclass
class ParamVector:
    """Ordered, detached copy of a model's named parameters."""

    entries: list

    @property
    def names(self):
        return [n for n, _ in self.entries]

    def as_dict(self):
        return dict(self.entries)

    def clone(self) -> "ParamVector":
        return ParamVector([(n, v.detach().clone()) for n, v in self.entries])

    def equal(self, other: "ParamVector") -> bool:
        if self.names != other.names:
            return False
        return all(torch.equal(a, b) for (_, a), (_, b) in zip(self.entries, other.entries))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, v in self.entries:
            h.update(name.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def check_compatible(expected: ParamVector, got: ParamVector):
    """Raise :class:`StructureError` naming the first entry that does not line up."""
    exp, act = expected.as_dict(), got.as_dict()
    for name in exp:
        if name not in act:
            raise StructureError(f"missing parameter entry {name!r}")
        if tuple(exp[name].shape) != tuple(act[name].shape):
            raise StructureError(
                f"shape mismatch for {name!r}: expected {tuple(exp[name].shape)}, got {tuple(act[name].shape)}"
            )
    for name in act:
        if name not in exp:
            raise StructureError(f"unexpected parameter entry {name!r}")
    if expected.names != got.names:
        raise StructureError("parameter entries are in a different order")


def extract_params(model: nn.Module) -> ParamVector:
    return ParamVector([(n, p.detach().clone()) for n, p in model.named_parameters()])


@torch.no_grad()
def inject_params(model: nn.Module, params: ParamVector):
    current = ParamVector(list(model.named_parameters()))
    check_compatible(current, params)
    for (_, p), (_, v) in zip(current.entries, params.entries):
        p.copy_(v)


def freeze(model: nn.Module) -> nn.Module:
    model.requires_grad_(False)
    # drop gradients left over from any earlier training
    for p in model.parameters():
        p.grad = None
    model.eval()
    model.trainable = False
    return model


def clone_model(model: RestorationModel) -> RestorationModel:
    return copy.deepcopy(model)


def save_checkpoint(path, model: RestorationModel, meta: dict | None = None):
    """Write a single ``.npz`` holding the arch spec, named arrays and metadata.

    Layout: ``__arch__`` and ``__meta__`` are JSON strings, every parameter is
    stored under ``param/<name>`` with its native dtype.
    """
    arrays = {f"param/{n}": v.cpu().numpy() for n, v in extract_params(model).entries}
    arrays["__arch__"] = np.array(json.dumps(asdict(model.spec)))
    arrays["__meta__"] = np.array(json.dumps({"version": CHECKPOINT_VERSION, **(meta or {})}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            spec = ArchSpec(**json.loads(str(data["__arch__"])))
            meta = json.loads(str(data["__meta__"]))
            arrays = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    except (KeyError, ValueError, TypeError) as exc:
        raise LoadError(f"{path}: not a valid checkpoint ({exc})") from exc
    dtype = torch.from_numpy(next(iter(arrays.values()))).dtype if arrays else torch.float32
    model = RestorationModel(spec, dtype=dtype)
    names = [n for n, _ in model.named_parameters()]
    try:
        inject_params(model, ParamVector([(n, torch.from_numpy(arrays[n])) for n in names if n in arrays]))
    except StructureError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    return model, meta
