"""Offline training loop and the online learners.

Offline training samples classes uniformly (then images uniformly within
the class), optimizes the weighted four-term loss, clips the global
gradient norm and re-anchors every codebook after each step.

Three online learners consume stream batches:

* the naive learner applies the offline loss to each batch;
* the anomaly-adaptive learner scores each image with its current shadow
  parameters first, derives a pseudo-mask and a gradient weight from the
  image score, optimizes the mask-adjusted loss, and publishes an EMA of
  the shadow parameters for evaluation;
* the frozen learner never updates anything.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .archive import FeatureRecord
from .concepts import ABNORMAL_PROMPTS
from .fusion import detect_score
from .model import AnomalyModel, LossTerms, PromptChoice
from .optim import AdamW, EmaPair, OptimizerError, clip_grad_norm, ema_update
from .recon import re_anchor

__all__ = [
    "TrainingError",
    "TrainConfig",
    "OnlineConfig",
    "StepLosses",
    "OnlineDiagnostics",
    "group_by_class",
    "balance_sample",
    "pseudo_mask",
    "OfflineTrainer",
    "NaiveOnline",
    "AnomalyAdaptiveOnline",
    "FrozenOnline",
    "make_learner",
]

LOSS_NAMES = ("vq", "rec", "gen", "sem")


class TrainingError(RuntimeError):
    """Non-finite loss or malformed training input."""


@dataclass(frozen=True)
class TrainConfig:
    lam_vq: float = 1.0
    lam_rec: float = 1.0
    lam_gen: float = 1.0
    lam_sem: float = 1.0
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    grad_clip: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0

    def validated(self) -> "TrainConfig":
        for name in ("lam_vq", "lam_rec", "lam_gen", "lam_sem"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")
        if not self.grad_clip > 0:
            raise ValueError("gradient clip norm must be positive")
        return self

    def weights(self) -> dict[str, float]:
        return {"vq": self.lam_vq, "rec": self.lam_rec,
                "gen": self.lam_gen, "sem": self.lam_sem}


@dataclass(frozen=True)
class OnlineConfig:
    delta: int = 16
    gamma: float = 0.3
    beta: float = 5.0
    tau: float = 0.2
    mask_fraction: float = 0.95
    use_pseudo_mask: bool = True
    grad_clip: float = 1e-3
    algorithm: str = "anomaly_adaptive"

    def validated(self) -> "OnlineConfig":
        if self.delta < 1:
            raise ValueError("batch size delta must be at least 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.beta < 1.0:
            raise ValueError("beta must be at least 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ValueError("mask fraction must lie in (0, 1]")
        if not self.grad_clip > 0:
            raise ValueError("gradient clip norm must be positive")
        if self.algorithm not in ("naive", "anomaly_adaptive", "frozen"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        return self


@dataclass
class StepLosses:
    vq: float
    rec: float
    gen: float
    sem: float
    total: float
    grad_norm: float

    def as_dict(self) -> dict[str, float]:
        return {"vq": self.vq, "rec": self.rec, "gen": self.gen,
                "sem": self.sem, "total": self.total,
                "grad_norm": self.grad_norm}


@dataclass
class OnlineDiagnostics:
    step: int
    losses: dict[str, float] = field(default_factory=dict)
    lam: list[float] = field(default_factory=list)
    mask_coverage: list[float] = field(default_factory=list)
    skipped: bool = False
    note: str = ""


def group_by_class(records: list[FeatureRecord]) -> "OrderedDict[str, list[FeatureRecord]]":
    """Bucket training records by class label (offline use only)."""
    groups: "OrderedDict[str, list[FeatureRecord]]" = OrderedDict()
    for rec in records:
        groups.setdefault(rec.class_label, []).append(rec)
    return groups


def balance_sample(groups: "OrderedDict[str, list[FeatureRecord]]",
                   batch_size: int, rng: np.random.Generator) -> list[FeatureRecord]:
    """Class-uniform sampling with replacement; empty classes are skipped."""
    names = [n for n, rs in groups.items() if rs]
    if not names:
        raise ValueError("no non-empty classes to sample from")
    batch = []
    for _ in range(batch_size):
        name = names[int(rng.integers(len(names)))]
        members = groups[name]
        batch.append(members[int(rng.integers(len(members)))])
    return batch


def pseudo_mask(y_map: np.ndarray, fraction: float) -> np.ndarray:
    """Binary map of pixels at or above fraction x image score.

    A constant map (including all zeros) marks every pixel, since each
    one meets its own threshold.
    """
    thr = fraction * detect_score(y_map)
    return (np.asarray(y_map, dtype=np.float64) >= thr).astype(np.float64)


def _check_finite(terms: LossTerms, record_id: str) -> None:
    for name, t in terms.as_dict().items():
        if not np.isfinite(t.data):
            raise TrainingError(f"non-finite {name} loss on record {record_id!r}")


def _weighted_step(model: AnomalyModel, opt: AdamW, batch: list[FeatureRecord],
                   choices: list[PromptChoice], masks: list[np.ndarray | None],
                   lams: list[float], weights: dict[str, float],
                   clip: float) -> StepLosses:
    """One optimizer step on (1/n) sum_j lam_j * L_j; returns mean losses."""
    params = model.named_parameters()
    sums = dict.fromkeys(LOSS_NAMES, 0.0)
    total: T.Tensor | None = None
    inv = 1.0 / len(batch)
    for rec, choice, mask, lam in zip(batch, choices, masks, lams):
        terms = model.loss_terms(rec, choice, mask=mask, training=True)
        _check_finite(terms, rec.record_id)
        record_total: T.Tensor | None = None
        for name, t in terms.as_dict().items():
            sums[name] += float(t.data)
            if weights[name] == 0.0:
                continue
            piece = T.mul(t, weights[name])
            record_total = piece if record_total is None else T.add(record_total, piece)
        if record_total is None:
            record_total = T.mul(terms.vq, 0.0)
        contrib = T.mul(record_total, lam * inv)
        total = contrib if total is None else T.add(total, contrib)
    T.zero_grads(params.values())
    T.backward(total)
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = clip_grad_norm(grads, clip)
    opt.step()
    re_anchor(model.vq)
    means = {name: sums[name] * inv for name in LOSS_NAMES}
    mean_total = sum(weights[n] * means[n] for n in LOSS_NAMES)
    return StepLosses(vq=means["vq"], rec=means["rec"], gen=means["gen"],
                      sem=means["sem"], total=mean_total, grad_norm=norm)


class OfflineTrainer:
    """Balance-sampled offline optimization of all model parameters."""

    def __init__(self, model: AnomalyModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg.validated()
        self.opt = AdamW(model.named_parameters(), lr=cfg.lr,
                         weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)

    def step(self, batch: list[FeatureRecord]) -> StepLosses:
        if not batch:
            raise ValueError("empty training batch")
        k = len(self.model.concepts.names)
        choices = [PromptChoice.draw(self.rng, k, ABNORMAL_PROMPTS) for _ in batch]
        return _weighted_step(self.model, self.opt, batch, choices,
                              [None] * len(batch), [1.0] * len(batch),
                              self.cfg.weights(), self.cfg.grad_clip)

    def run(self, groups: "OrderedDict[str, list[FeatureRecord]]",
            steps_per_epoch: int | None = None) -> list[StepLosses]:
        n_records = sum(len(v) for v in groups.values())
        if steps_per_epoch is None:
            steps_per_epoch = max(1, math.ceil(n_records / self.cfg.batch_size))
        history = []
        for _ in range(self.cfg.epochs):
            for _ in range(steps_per_epoch):
                batch = balance_sample(groups, self.cfg.batch_size, self.rng)
                history.append(self.step(batch))
        return history


class NaiveOnline:
    """Stream learner that re-applies the offline loss to each batch."""

    def __init__(self, model: AnomalyModel, train_cfg: TrainConfig,
                 online_cfg: OnlineConfig):
        self.model = model
        self.train_cfg = train_cfg.validated()
        self.online_cfg = online_cfg.validated()
        self.opt = AdamW(model.named_parameters(), lr=train_cfg.lr,
                         weight_decay=train_cfg.weight_decay)
        self.rng = np.random.default_rng(train_cfg.seed)
        self._step = 0

    @property
    def published(self) -> AnomalyModel:
        return self.model

    def observe(self, batch: list[FeatureRecord]) -> OnlineDiagnostics:
        self._step += 1
        if not batch:
            return OnlineDiagnostics(step=self._step, note="empty batch")
        k = len(self.model.concepts.names)
        choices = [PromptChoice.draw(self.rng, k, ABNORMAL_PROMPTS) for _ in batch]
        losses = _weighted_step(self.model, self.opt, batch, choices,
                                [None] * len(batch), [1.0] * len(batch),
                                self.train_cfg.weights(), self.online_cfg.grad_clip)
        return OnlineDiagnostics(step=self._step, losses=losses.as_dict(),
                                 lam=[1.0] * len(batch),
                                 mask_coverage=[0.0] * len(batch))


class AnomalyAdaptiveOnline:
    """Stream learner with pseudo-masks, score weighting and EMA publication."""

    def __init__(self, model: AnomalyModel, train_cfg: TrainConfig,
                 online_cfg: OnlineConfig):
        self.shadow = model
        self.train_cfg = train_cfg.validated()
        self.online_cfg = online_cfg.validated()
        self.opt = AdamW(model.named_parameters(), lr=train_cfg.lr,
                         weight_decay=train_cfg.weight_decay)
        self.rng = np.random.default_rng(train_cfg.seed)
        self._published_model = model.clone()
        shadow_refs = {name: t.data for name, t in model.named_parameters().items()}
        shadow_refs.update(model.named_stats())
        self.pair = EmaPair(published=model.state(), shadow=shadow_refs,
                            gamma=online_cfg.gamma)
        self._step = 0

    @property
    def published(self) -> AnomalyModel:
        return self._published_model

    def observe(self, batch: list[FeatureRecord]) -> OnlineDiagnostics:
        self._step += 1
        if not batch:
            return OnlineDiagnostics(step=self._step, note="empty batch")
        cfg = self.online_cfg
        k = len(self.shadow.concepts.names)
        lams, masks, coverage = [], [], []
        for rec in batch:
            y_map = self.shadow.anomaly_field(rec)
            score = detect_score(y_map)
            lams.append(cfg.beta if score >= cfg.tau else 1.0)
            if cfg.use_pseudo_mask:
                mask = pseudo_mask(y_map, cfg.mask_fraction)
                masks.append(mask)
                coverage.append(float(mask.mean()))
            else:
                masks.append(None)
                coverage.append(0.0)
        choices = [PromptChoice.draw(self.rng, k, ABNORMAL_PROMPTS) for _ in batch]
        snapshot = self.shadow.state()
        try:
            losses = _weighted_step(self.shadow, self.opt, batch, choices, masks,
                                    lams, self.train_cfg.weights(), cfg.grad_clip)
        except (TrainingError, OptimizerError) as exc:
            self.shadow.load_state(snapshot)
            return OnlineDiagnostics(step=self._step, lam=lams,
                                     mask_coverage=coverage, skipped=True,
                                     note=str(exc))
        ema_update(self.pair)
        self._published_model.load_state(self.pair.published)
        return OnlineDiagnostics(step=self._step, losses=losses.as_dict(),
                                 lam=lams, mask_coverage=coverage)


class FrozenOnline:
    """Control learner: observes the stream but never adapts."""

    def __init__(self, model: AnomalyModel):
        self.model = model
        self._step = 0

    @property
    def published(self) -> AnomalyModel:
        return self.model

    def observe(self, batch: list[FeatureRecord]) -> OnlineDiagnostics:
        self._step += 1
        return OnlineDiagnostics(step=self._step, note="frozen")


def make_learner(model: AnomalyModel, train_cfg: TrainConfig,
                 online_cfg: OnlineConfig):
    algo = online_cfg.validated().algorithm
    if algo == "naive":
        return NaiveOnline(model, train_cfg, online_cfg)
    if algo == "anomaly_adaptive":
        return AnomalyAdaptiveOnline(model, train_cfg, online_cfg)
    return FrozenOnline(model)
