"""AdamW, global gradient clipping and EMA parameter publication."""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["OptimizerError", "AdamW", "clip_grad_norm", "EmaPair", "ema_update"]


class OptimizerError(RuntimeError):
    """Non-finite gradient or malformed optimizer input."""


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Updates run in place on each parameter's array so external views of the
    state stay valid. Parameters whose ``.grad`` is None are treated as
    having zero gradient (weight decay still applies).
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. NaN/inf gradients are rejected.
    """
    gs = list(grads)
    total = 0.0
    for g in gs:
        if not np.isfinite(g).all():
            raise OptimizerError("non-finite gradient in clip_grad_norm")
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in gs:
            g *= scale
    return norm


class EmaPair:
    """Published parameters plus the shadow set actually being trained.

    ``shadow`` holds live references to the training arrays; ``published``
    owns private copies. Both must be structurally identical.
    """

    def __init__(self, published: Mapping[str, np.ndarray],
                 shadow: Mapping[str, np.ndarray], gamma: float):
        if set(published) != set(shadow):
            raise ValueError("published/shadow key sets differ")
        for k in published:
            if published[k].shape != shadow[k].shape:
                raise ValueError(f"shape mismatch for {k!r}")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.published = {k: np.array(v) for k, v in published.items()}
        self.shadow = shadow
        self.gamma = gamma


def ema_update(pair: EmaPair) -> Mapping[str, np.ndarray]:
    """Publish theta_t = gamma * theta_{t-1} + (1 - gamma) * shadow_t."""
    g = pair.gamma
    for k, pub in pair.published.items():
        pub *= g
        pub += (1.0 - g) * pair.shadow[k]
    return pair.published
