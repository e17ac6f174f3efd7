"""Semantics branch: prompt similarity maps, anomaly map and margin loss.

Each pixel of a feature map is compared against every concept's normal
prompt feature and its five abnormal prompt features.  Per-concept maps
are blended by the concept probabilities.  The aggregation over the five
abnormal prompts depends on what the features are supposed to be: when
training on normal features we keep the *most* similar abnormal prompt
(the one most likely to confuse the model), when training on generated
abnormal features we keep the *least* similar one, and at inference we
again keep the maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .concepts import ABNORMAL_PROMPTS, PromptBank

__all__ = [
    "MODES",
    "SemanticsMaps",
    "similarity_maps",
    "sem_anomaly_map",
    "hinge_normal",
    "hinge_abnormal",
    "sem_loss",
]

MODES = ("train-normal", "train-abnormal", "inference")


@dataclass
class SemanticsMaps:
    """Concept-weighted normal and abnormal similarity maps for one image."""

    s_n: T.Tensor  # (h, w) in [-1, 1]
    s_a: T.Tensor  # (h, w) in [-1, 1]
    mode: str


def similarity_maps(fp: T.Tensor, bank: PromptBank, p: T.Tensor,
                    mode: str) -> SemanticsMaps:
    """Cosine maps against prompt features, blended by concept scores."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if fp.ndim != 3:
        raise T.ShapeError(f"feature map must be (h, w, d), got {fp.shape}")
    k, d = bank.normal.shape
    if fp.shape[-1] != d:
        raise T.ShapeError(f"feature width {fp.shape[-1]} != prompt width {d}")
    if p.shape != (k,):
        raise T.ShapeError(f"concept scores shape {p.shape}, expected ({k},)")
    fold = T.elem_min if mode == "train-abnormal" else T.elem_max
    s_n = None
    s_a = None
    for c in range(k):
        weight = T.take(p, c)
        sim_n = T.cosine_sim(fp, T.take(bank.normal, c))
        s_n = _accumulate(s_n, weight, sim_n)
        per_prompt = None
        for i in range(ABNORMAL_PROMPTS):
            sim = T.cosine_sim(fp, T.take(bank.abnormal, (c, i)))
            per_prompt = sim if per_prompt is None else fold(per_prompt, sim)
        s_a = _accumulate(s_a, weight, per_prompt)
    return SemanticsMaps(s_n=s_n, s_a=s_a, mode=mode)


def _accumulate(acc: T.Tensor | None, weight: T.Tensor, term: T.Tensor) -> T.Tensor:
    contrib = T.mul(weight, term)
    return contrib if acc is None else T.add(acc, contrib)


def sem_anomaly_map(maps: SemanticsMaps) -> T.Tensor:
    """Rescale the similarity gap into [0, 1]: (S^a - S^n + 2) / 4."""
    return T.mul(T.add(T.sub(maps.s_a, maps.s_n), T.constant(2.0)), 0.25)


def hinge_normal(maps: SemanticsMaps, delta: float,
                 weights: np.ndarray | None = None) -> T.Tensor:
    """Mean of the gap lower-clipped at -delta; small when normal wins."""
    _check_delta(delta)
    gap = T.clip_min(T.sub(maps.s_a, maps.s_n), -delta)
    return T.weighted_mean(gap, weights)


def hinge_abnormal(maps: SemanticsMaps, delta: float,
                   weights: np.ndarray | None = None) -> T.Tensor:
    """Mean of the negated gap lower-clipped at -delta; small when abnormal wins."""
    _check_delta(delta)
    gap = T.clip_min(T.neg(T.sub(maps.s_a, maps.s_n)), -delta)
    return T.weighted_mean(gap, weights)


def sem_loss(maps_normal: SemanticsMaps, maps_abnormal: SemanticsMaps,
             delta: float) -> T.Tensor:
    """Margin loss: push the gap negative on normals, positive on abnormals."""
    return T.add(hinge_normal(maps_normal, delta),
                 hinge_abnormal(maps_abnormal, delta))


def _check_delta(delta: float) -> None:
    if not delta > 0:
        raise ValueError(f"margin must be positive, got {delta}")
