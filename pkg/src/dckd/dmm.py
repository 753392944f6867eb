"""Distribution mapping: per-pixel soft codebook assignments and their cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ParameterError, StructureError

SIGNS = ("negated", "literal")
LOG_FLOOR = 1e-12


@dataclass
class CategoryMap:
    probs: torch.Tensor  # (B, H, W, M)

    @property
    def M(self):
        return self.probs.shape[-1]


def squared_distances(features: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """(B, d, H, W) features against (M, d) codes -> (B, H, W, M)."""
    f = features.permute(0, 2, 3, 1).unsqueeze(-2)
    return (f - codes.to(features.dtype)).pow(2).sum(-1)


def category_distribution(features: torch.Tensor, codebook, distance_sign: str = "negated",
                          temperature: float = 1.0) -> CategoryMap:
    """Softmax over codebook distances at every pixel.

    ``negated`` favours the nearest code; ``literal`` applies the softmax to
    the raw distances and therefore favours the farthest one.
    """
    codes = getattr(codebook, "entries", codebook)
    if features.ndim != 4 or features.shape[1] != codes.shape[1]:
        raise StructureError(f"feature dim {tuple(features.shape)} does not match codebook dim {codes.shape[1]}")
    if distance_sign not in SIGNS:
        raise ParameterError(f"distance_sign must be one of {SIGNS}, got {distance_sign!r}")
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    sign = -1.0 if distance_sign == "negated" else 1.0
    logits = sign * squared_distances(features, codes) / temperature
    return CategoryMap(torch.softmax(logits, dim=-1))


def pixelwise_cross_entropy(target: CategoryMap, pred: CategoryMap, floor: float = LOG_FLOOR) -> torch.Tensor:
    """Mean over pixels of ``-sum_m target_m * log(pred_m)``; ``target`` is treated as a constant."""
    if target.probs.shape != pred.probs.shape:
        raise StructureError(f"category maps differ: {tuple(target.probs.shape)} vs {tuple(pred.probs.shape)}")
    ce = -(target.probs.detach() * pred.probs.clamp_min(floor).log()).sum(-1)
    return ce.mean()


def entropy(cmap: CategoryMap, floor: float = LOG_FLOOR) -> torch.Tensor:
    return pixelwise_cross_entropy(cmap, cmap, floor)


def dmm_loss(teacher_out: torch.Tensor, student_out: torch.Tensor, encoder, codebook,
             distance_sign: str = "negated", temperature: float = 1.0) -> torch.Tensor:
    if teacher_out.shape != student_out.shape:
        raise StructureError(f"teacher {tuple(teacher_out.shape)} and student {tuple(student_out.shape)} differ")
    with torch.no_grad():
        c_t = category_distribution(encoder.deepest_features(teacher_out.detach()), codebook, distance_sign, temperature)
    c_s = category_distribution(encoder.deepest_features(student_out), codebook, distance_sign, temperature)
    return pixelwise_cross_entropy(c_t, c_s)
