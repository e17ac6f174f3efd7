"""Concept discovery over the vocabulary, prompt features and soft switching.

Concepts are picked once per dataset by majority vote: every training
image's final vector votes for its most similar vocabulary entries, and
the top-K entries become the concept set. Vocabulary entries that serve as
prompt phrases (referenced in the archive's prompt-text section) are
storage for prompt embeddings and are excluded from the candidate pool.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .archive import EmbeddingArchive

__all__ = ["ConceptSet", "PromptBank", "init_concepts", "build_prompt_bank",
           "concept_score", "soft_mix", "concepts_to_json"]

ABNORMAL_PROMPTS = 5


@dataclass
class ConceptSet:
    """Selected vocabulary entries with learnable embeddings t_c."""

    names: list[str]
    embeddings: T.Tensor  # (K, d), leaf parameter
    tallies: dict[str, int] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.names)


@dataclass
class PromptBank:
    """Per-concept normal prompt feature plus 5 abnormal prompt features."""

    normal: T.Tensor  # (K, d), leaf parameter
    abnormal: T.Tensor  # (K, 5, d), leaf parameter
    texts: dict[str, list[str]] = field(default_factory=dict)


def _candidate_indices(archive: EmbeddingArchive) -> list[int]:
    phrase_names = {text for _, text in archive.prompt_texts}
    return [i for i, v in enumerate(archive.vocab) if v.name not in phrase_names]


def init_concepts(archive: EmbeddingArchive, k: int, votes_per_image: int = 1) -> ConceptSet:
    """Majority-vote concept selection from training final vectors.

    Ties resolve by higher summed similarity, then lexicographic name, so
    the result is a pure function of the archive.
    """
    cand = _candidate_indices(archive)
    if not cand:
        raise ValueError("archive has no concept candidates")
    if not 1 <= k <= len(cand):
        raise ValueError(f"k must be in [1, {len(cand)}], got {k}")
    if votes_per_image < 1:
        raise ValueError("votes_per_image must be >= 1")
    train = archive.train_records()
    if not train:
        raise ValueError("archive has no training records")
    words = np.stack([archive.vocab[i].vec for i in cand]).astype(np.float64)
    wn = words / np.maximum(np.linalg.norm(words, axis=1, keepdims=True), 1e-12)
    feats = np.stack([r.final_vec for r in train]).astype(np.float64)
    fn = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    sims = fn @ wn.T  # (n_train, n_candidates)
    votes = np.zeros(len(cand), dtype=np.int64)
    top = min(votes_per_image, len(cand))
    for row in sims:
        for j in np.argsort(-row, kind="stable")[:top]:
            votes[j] += 1
    sum_sim = sims.sum(axis=0)
    order = sorted(range(len(cand)),
                   key=lambda j: (-votes[j], -sum_sim[j], archive.vocab[cand[j]].name))
    chosen = order[:k]
    names = [archive.vocab[cand[j]].name for j in chosen]
    emb = np.stack([archive.vocab[cand[j]].vec for j in chosen]).astype(np.float32)
    tallies = {archive.vocab[cand[j]].name: int(votes[j]) for j in order}
    return ConceptSet(names=names, embeddings=T.Tensor(emb, requires_grad=True),
                      tallies=tallies)


def concepts_to_json(cs: ConceptSet) -> str:
    return json.dumps({"names": cs.names, "k": cs.k, "votes": cs.tallies},
                      sort_keys=True, indent=2)


def _fallback_abnormal(name: str, d: int) -> np.ndarray:
    """Deterministic stand-in directions for concepts without prompt phrases."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vecs = rng.standard_normal((ABNORMAL_PROMPTS, d))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def build_prompt_bank(archive: EmbeddingArchive, concepts: ConceptSet) -> PromptBank:
    """Resolve each concept's prompt phrases to their stored embeddings.

    A concept either carries exactly 1 normal + 5 abnormal phrases in the
    archive (in that order), or none at all — in which case the concept's
    own vector stands in for the normal prompt and seeded random unit
    directions for the abnormal ones.
    """
    d = archive.d_final
    by_name = {v.name: v.vec for v in archive.vocab}
    normal = np.zeros((concepts.k, d), dtype=np.float32)
    abnormal = np.zeros((concepts.k, ABNORMAL_PROMPTS, d), dtype=np.float32)
    texts: dict[str, list[str]] = {}
    for ci, name in enumerate(concepts.names):
        idx = archive.vocab_index(name)
        phrases = archive.prompts_for(idx)
        if not phrases:
            normal[ci] = concepts.embeddings.data[ci]
            abnormal[ci] = _fallback_abnormal(name, d).astype(np.float32)
            texts[name] = []
            continue
        if len(phrases) != 1 + ABNORMAL_PROMPTS:
            raise ValueError(f"concept {name!r}: expected 1+{ABNORMAL_PROMPTS} prompt "
                             f"phrases, found {len(phrases)}")
        missing = [p for p in phrases if p not in by_name]
        if missing:
            raise ValueError(f"concept {name!r}: phrases without embeddings: {missing}")
        normal[ci] = by_name[phrases[0]]
        for a, phrase in enumerate(phrases[1:]):
            abnormal[ci, a] = by_name[phrase]
        texts[name] = phrases
    return PromptBank(normal=T.Tensor(normal, requires_grad=True),
                      abnormal=T.Tensor(abnormal, requires_grad=True), texts=texts)


def concept_score(final_vec: np.ndarray, concepts: ConceptSet,
                  temperature: float = 1.0) -> T.Tensor:
    """Soft concept assignment p = softmax(cos(f, t_c) / temperature)."""
    f = np.asarray(final_vec, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError(f"final vector must be 1-D, got shape {f.shape}")
    if np.linalg.norm(f) == 0.0:
        raise ValueError("zero-norm final vector")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    sims = T.cosine_sim(concepts.embeddings, T.constant(f))
    return T.softmax(T.mul(sims, 1.0 / temperature))


def soft_mix(p: T.Tensor, blocks: list[T.Tensor]) -> T.Tensor:
    """Probability-weighted sum of per-concept outputs."""
    if p.data.shape != (len(blocks),):
        raise T.ShapeError(f"weights {p.data.shape} vs {len(blocks)} blocks")
    shape = blocks[0].data.shape
    for b in blocks:
        if b.data.shape != shape:
            raise T.ShapeError("soft_mix blocks must share a shape")
    out = T.mul(T.take(p, 0), blocks[0])
    for i in range(1, len(blocks)):
        out = T.add(out, T.mul(T.take(p, i), blocks[i]))
    return out
