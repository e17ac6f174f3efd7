"""Full detector assembly: parameters, loss terms and prediction."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .archive import EmbeddingArchive, FeatureRecord
from .concepts import ConceptSet, PromptBank, concept_score
from .fusion import DETECT_KERNEL, Prediction, bilinear_resize, detect_score, fuse
from .recon import (
    ConceptVq,
    GeneratorParams,
    ProjectionParams,
    canonical_input,
    generate_pseudo,
    hierarchical_forward,
    project,
    recon_anomaly_map,
)
from .semantics import hinge_abnormal, hinge_normal, sem_anomaly_map, similarity_maps

__all__ = ["ModelConfig", "PromptChoice", "LossTerms", "AnomalyModel"]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and scoring knobs; widths come from the archive."""

    n_codes: int = 16
    gen_hidden: int = 256
    nearest: str = "l2"
    alpha: float = 0.3
    delta: float = 0.1
    temperature: float = 1.0
    seed: int = 0

    def validated(self) -> "ModelConfig":
        if self.n_codes < 1:
            raise ValueError("need at least one code per book")
        if self.gen_hidden < 1:
            raise ValueError("generator hidden width must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.delta > 0:
            raise ValueError(f"margin must be positive, got {self.delta}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        return self


@dataclass(frozen=True)
class PromptChoice:
    """Which prompt feature conditions each generator pass."""

    normal_concept: int
    abnormal_concept: int
    abnormal_index: int

    @classmethod
    def draw(cls, rng: np.random.Generator, k: int, n_abnormal: int) -> "PromptChoice":
        return cls(normal_concept=int(rng.integers(k)),
                   abnormal_concept=int(rng.integers(k)),
                   abnormal_index=int(rng.integers(n_abnormal)))


@dataclass
class LossTerms:
    vq: T.Tensor
    rec: T.Tensor
    gen: T.Tensor
    sem: T.Tensor

    def as_dict(self) -> "OrderedDict[str, T.Tensor]":
        return OrderedDict(vq=self.vq, rec=self.rec, gen=self.gen, sem=self.sem)


class AnomalyModel:
    """Two-branch detector over archived feature records.

    The reconstruction branch projects, quantizes against concept
    codebooks and decodes; the semantics branch compares against prompt
    features.  Both share the concept scores computed from the record's
    final vector.
    """

    def __init__(self, cfg: ModelConfig, concepts: ConceptSet, bank: PromptBank,
                 proj: ProjectionParams, vq: ConceptVq, gen: GeneratorParams):
        self.cfg = cfg.validated()
        self.concepts = concepts
        self.bank = bank
        self.proj = proj
        self.vq = vq
        self.gen = gen

    @classmethod
    def build(cls, cfg: ModelConfig, archive: EmbeddingArchive,
              concepts: ConceptSet, bank: PromptBank) -> "AnomalyModel":
        cfg = cfg.validated()
        rng = np.random.default_rng(cfg.seed)
        d = archive.d_final
        k = len(concepts.names)
        total_channels = sum(c for (_, _, c) in archive.layer_shapes)
        proj = ProjectionParams.build(archive.layer_shapes, d, rng)
        vq = ConceptVq(levels=len(archive.layer_shapes), n_concepts=k,
                       n_codes=cfg.n_codes, d_feat=d, in_channels=d,
                       out_channels=total_channels, rng=rng, nearest=cfg.nearest)
        gen = GeneratorParams.build(d_feat=d, hidden=cfg.gen_hidden, rng=rng)
        return cls(cfg, concepts, bank, proj, vq, gen)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> "OrderedDict[str, T.Tensor]":
        out = OrderedDict()
        out["concepts.t"] = self.concepts.embeddings
        out["prompts.n"] = self.bank.normal
        out["prompts.a"] = self.bank.abnormal
        out.update(self.proj.tensors())
        out.update(self.vq.tensors())
        out.update(self.gen.tensors())
        return out

    def named_stats(self) -> "OrderedDict[str, np.ndarray]":
        return self.gen.stats()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, t in self.named_parameters().items():
            out[name] = t.data.copy()
        for name, arr in self.named_stats().items():
            out[name] = arr.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        stats = self.named_stats()
        expected = set(params) | set(stats)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in params.items():
            if state[name].shape != t.data.shape:
                raise T.ShapeError(f"{name}: stored {state[name].shape}, "
                                   f"model {t.data.shape}")
            t.data[...] = state[name]
        for name, arr in stats.items():
            arr[...] = state[name]

    def clone(self) -> "AnomalyModel":
        return copy.deepcopy(self)

    # -- forward paths ------------------------------------------------------

    def concept_probs(self, record: FeatureRecord) -> T.Tensor:
        return concept_score(record.final_vec, self.concepts,
                             temperature=self.cfg.temperature)

    def _recon_pass(self, record: FeatureRecord,
                    stops: T.StopCapture | None = None):
        fp = project(record, self.proj)
        fi = canonical_input(record)
        p = self.concept_probs(record)
        fr, vq_px = hierarchical_forward(fp, self.vq, self.concepts, p, stops=stops)
        return fp, fi, p, fr, vq_px

    def loss_terms(self, record: FeatureRecord, choice: PromptChoice,
                   mask: np.ndarray | None = None,
                   stops: T.StopCapture | None = None,
                   training: bool = True) -> LossTerms:
        """All four loss scalars for one record.

        Without a mask this is the offline composition: reconstruct the
        input and the generated abnormal features back to the input,
        keep latents near their codes, make generated normals look like
        the input, and push the semantic gap the right way on real
        (normal) and generated (abnormal) features.  With a pseudo-mask
        the per-pixel reconstruction and VQ terms only count unmasked
        pixels, and the semantic margin is split across the real map:
        normal direction off-mask, abnormal direction on-mask.
        """
        fp, fi, p, fr, vq_px = self._recon_pass(record, stops)
        n_vec = T.take(self.bank.normal, choice.normal_concept)
        a_vec = T.take(self.bank.abnormal,
                       (choice.abnormal_concept, choice.abnormal_index))
        f_n = generate_pseudo(fp, n_vec, self.gen, training=training)
        f_a = generate_pseudo(fp, a_vec, self.gen, training=training)
        fr_a, _ = hierarchical_forward(f_a, self.vq, self.concepts, p, stops=stops)

        keep = None if mask is None else 1.0 - mask
        rec_real = T.weighted_mean(T.sub(T.constant(1.0), T.cosine_sim(fi, fr)), keep)
        rec_gen = T.weighted_mean(T.sub(T.constant(1.0), T.cosine_sim(fi, fr_a)), keep)
        rec = T.add(rec_real, rec_gen)
        vq_weights = None if keep is None else keep.ravel()
        vq = T.weighted_mean(vq_px, vq_weights)
        gen = T.tmean(T.sub(T.constant(1.0), T.cosine_sim(fp, f_n)))

        if mask is None:
            maps_n = similarity_maps(fp, self.bank, p, "train-normal")
            maps_a = similarity_maps(f_a, self.bank, p, "train-abnormal")
            sem = T.add(hinge_normal(maps_n, self.cfg.delta),
                        hinge_abnormal(maps_a, self.cfg.delta))
        else:
            maps_n = similarity_maps(fp, self.bank, p, "train-normal")
            maps_a = similarity_maps(fp, self.bank, p, "train-abnormal")
            sem = T.add(hinge_normal(maps_n, self.cfg.delta, weights=keep),
                        hinge_abnormal(maps_a, self.cfg.delta, weights=mask))
        return LossTerms(vq=vq, rec=rec, gen=gen, sem=sem)

    def anomaly_field(self, record: FeatureRecord) -> np.ndarray:
        """Fused anomaly map at feature resolution, no gradients."""
        with T.no_grad():
            fp, fi, p, fr, _ = self._recon_pass(record)
            y_r = recon_anomaly_map(fi, fr)
            y_s = sem_anomaly_map(similarity_maps(fp, self.bank, p, "inference"))
            return fuse(y_r.data, y_s.data, self.cfg.alpha)

    def predict(self, record: FeatureRecord,
                out_size: tuple[int, int] | None = None,
                kernel: int = DETECT_KERNEL) -> Prediction:
        field = self.anomaly_field(record)
        if out_size is not None and field.shape != tuple(out_size):
            field = bilinear_resize(field, tuple(out_size))
        return Prediction.from_map(record.record_id, field, kernel)
