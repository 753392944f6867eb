"""Dynamic contrastive regularization.

A history copy of the student is refreshed by EMA at growing intervals and
reconstructs randomly degraded inputs; its outputs are the negatives of a
ratio-style contrastive loss computed on frozen encoder features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import degradation
from .errors import ParameterError, StructureError
from .models import ParamVector, RestorationModel, check_compatible, extract_params, freeze, inject_params

DEFAULT_ALPHA = 0.1
DEFAULT_NUM_NEGATIVES = 5
DEFAULT_INITIAL_STEP = 1000
DEFAULT_EPS = 1e-8


@dataclass
class EMAState:
    history_params: ParamVector
    alpha: float = DEFAULT_ALPHA
    step: int = DEFAULT_INITIAL_STEP
    step_growth: float = 2.0
    step_cap: int | None = None
    last_update_iter: int = 0
    last_seen_iter: int = 0
    refresh_iters: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.step < 1:
            raise ParameterError(f"update step must be a positive integer, got {self.step}")
        if self.step_growth < 1:
            raise ParameterError(f"step growth must be >= 1, got {self.step_growth}")


def init_ema_state(student: RestorationModel, alpha=DEFAULT_ALPHA, initial_step=DEFAULT_INITIAL_STEP,
                   step_growth=2.0, step_cap=None) -> EMAState:
    """History starts as an exact copy of the student at iteration 0."""
    return EMAState(extract_params(student), alpha, int(initial_step), step_growth, step_cap)


def next_step(step: int, growth: float, cap) -> int:
    grown = math.ceil(step * growth)
    if cap is not None:
        grown = min(grown, int(cap))
    return max(step, grown)


def ema_blend(history: ParamVector, student: ParamVector, alpha: float) -> ParamVector:
    check_compatible(history, student)
    return ParamVector([
        (n, alpha * h + (1.0 - alpha) * s.to(h.dtype))
        for (n, h), (_, s) in zip(history.entries, student.entries)
    ])


def maybe_ema_update(state: EMAState, student_params: ParamVector, t: int) -> EMAState:
    """Refresh the history when ``step`` iterations have passed since the last refresh.

    Returns ``state`` itself when nothing fires, otherwise a new state with the
    blended parameters and the grown step.
    """
    if t <= state.last_seen_iter and not (t == 0 and state.last_seen_iter == 0):
        raise ParameterError(f"iteration {t} is not after the previous iteration {state.last_seen_iter}")
    check_compatible(state.history_params, student_params)
    state.last_seen_iter = t
    if t <= 0 or t - state.last_update_iter < state.step:
        return state
    return replace(
        state,
        history_params=ema_blend(state.history_params, student_params, state.alpha),
        step=next_step(state.step, state.step_growth, state.step_cap),
        last_update_iter=t,
        refresh_iters=state.refresh_iters + [t],
    )


def build_history_model(state: EMAState, spec, dtype=None) -> RestorationModel:
    if dtype is None:
        entries = state.history_params.entries
        dtype = entries[0][1].dtype if entries else torch.float32
    model = RestorationModel(spec, dtype=dtype)
    inject_params(model, state.history_params)
    return freeze(model)


@dataclass
class NegativeBatch:
    images: torch.Tensor  # (N, B, C, H, W)
    specs: list

    @property
    def N(self):
        return self.images.shape[0]


@torch.no_grad()
def generate_negatives(history_model: RestorationModel, lq: torch.Tensor, num: int = DEFAULT_NUM_NEGATIVES,
                       policy: str = degradation.DEFAULT_POLICY, rng: np.random.Generator | None = None,
                       ranges: degradation.DegradationRanges = degradation.DegradationRanges(),
                       specs=None) -> NegativeBatch:
    """Reconstruct ``num`` degraded copies of ``lq`` with the history model.

    Pass ``specs`` to replay a fixed set of degradations instead of sampling.
    """
    if specs is None:
        if num < 1:
            raise ParameterError(f"need at least one negative, got {num}")
        rng = rng if rng is not None else np.random.default_rng()
        specs = [degradation.sample_spec(policy, rng, ranges) for _ in range(num)]
    dirty = torch.cat([degradation.apply_spec(lq, s) for s in specs])
    out = history_model(dirty.to(lq.dtype))
    return NegativeBatch(out.reshape(len(specs), *lq.shape[:2], *out.shape[-2:]).detach(), list(specs))


def _l1_per_sample(a, b):
    return (a - b).abs().flatten(1).sum(dim=1)


def contrastive_from_features(anchor_levels, positive_levels, negative_levels, weights, eps=DEFAULT_EPS):
    """Per-sample weighted sum over levels of ``|a - p|_1 / (sum_j |a - n_j|_1 + eps)``.

    ``negative_levels[i]`` carries a leading negatives axis: (N, B, ...).
    Returns a (B,) tensor.
    """
    if not (len(anchor_levels) == len(positive_levels) == len(negative_levels) == len(weights)):
        raise StructureError("anchor, positive, negative pyramids and weights must have the same depth")
    total = 0.0
    for lam, fa, fp, fn in zip(weights, anchor_levels, positive_levels, negative_levels):
        if fa.shape != fp.shape or fn.shape[1:] != fa.shape:
            raise StructureError(f"feature shapes differ: anchor {tuple(fa.shape)}, positive {tuple(fp.shape)}, "
                                 f"negatives {tuple(fn.shape)}")
        num = _l1_per_sample(fa, fp)
        den = sum(_l1_per_sample(fa, fn[j]) for j in range(fn.shape[0]))
        total = total + lam * num / (den + eps)
    return total


def dynamic_contrastive_loss(anchor: torch.Tensor, positive: torch.Tensor, negatives, encoder,
                             eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Contrastive loss averaged over the batch. Only ``anchor`` receives gradients."""
    neg = negatives.images if isinstance(negatives, NegativeBatch) else negatives
    if neg.ndim != anchor.ndim + 1 or neg.shape[0] < 1:
        raise StructureError("negatives must be stacked as (N, *anchor.shape) with N >= 1")
    if positive.shape != anchor.shape or neg.shape[1:] != anchor.shape:
        raise StructureError(f"image shapes differ: anchor {tuple(anchor.shape)}, positive {tuple(positive.shape)}, "
                             f"negatives {tuple(neg.shape)}")
    pa = encoder(anchor)
    with torch.no_grad():
        pp = encoder(positive.detach())
        n = neg.shape[0]
        pn = encoder(neg.detach().reshape(n * anchor.shape[0], *anchor.shape[1:]))
        neg_levels = [f.reshape(n, anchor.shape[0], *f.shape[1:]) for f in pn.levels]
    return contrastive_from_features(pa.levels, pp.levels, neg_levels, pa.weights, eps).mean()
