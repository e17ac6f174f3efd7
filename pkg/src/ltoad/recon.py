"""Reconstruction branch: projection, hierarchical concept-VQ and generator.

Backbone layer maps are upsampled to the finest resolution, projected to a
shared feature width and averaged into F_p. A per-level encoder produces
latents that are vector-quantized against concept-specific codebooks; each
codebook is a learnable deviation field around its concept embedding, and
levels above the first quantize a reduction of (latent, previous level's
quantized output). Quantized levels are concatenated and decoded back to
the width of the raw concatenated input, and the per-pixel cosine gap
between the two is the reconstruction evidence.

The pseudo-feature generator is a five-layer pointwise stack over
(feature, prompt) channel pairs with interleaved per-channel
standardization.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .archive import FeatureRecord
from .concepts import ConceptSet

__all__ = [
    "ProjectionParams",
    "ConceptVq",
    "GeneratorParams",
    "project",
    "canonical_input",
    "nearest_codes",
    "quantize_nearest",
    "hierarchical_forward",
    "recon_anomaly_map",
    "generate_pseudo",
    "re_anchor",
    "code_budget",
]

COMMITMENT = 0.25


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int,
                 relu_gain: bool = True) -> np.ndarray:
    scale = np.sqrt((2.0 if relu_gain else 1.0) / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * scale).astype(np.float32)


@dataclass
class ProjectionParams:
    """Per-layer linear maps from backbone channels to the shared width."""

    weights: list[T.Tensor]
    biases: list[T.Tensor]

    @classmethod
    def build(cls, layer_shapes, d_feat: int, rng: np.random.Generator) -> "ProjectionParams":
        ws, bs = [], []
        for (_, _, c) in layer_shapes:
            ws.append(T.Tensor(_linear_init(rng, c, d_feat, relu_gain=False),
                               requires_grad=True))
            bs.append(T.Tensor(np.zeros(d_feat, dtype=np.float32), requires_grad=True))
        return cls(ws, bs)

    def tensors(self) -> "OrderedDict[str, T.Tensor]":
        out = OrderedDict()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"proj.{i}.w"] = w
            out[f"proj.{i}.b"] = b
        return out


def _upsampled_layers(record: FeatureRecord) -> tuple[list[T.Tensor], tuple[int, int]]:
    fh, fw = record.layer_maps[0].shape[:2]
    maps = []
    for lm in record.layer_maps:
        t = T.constant(lm)
        if lm.shape[:2] != (fh, fw):
            t = T.upsample_nearest(t, (fh, fw))
        maps.append(t)
    return maps, (fh, fw)


def project(record: FeatureRecord, params: ProjectionParams) -> T.Tensor:
    """F_p: upsample every layer to the finest grid, project, average."""
    maps, (fh, fw) = _upsampled_layers(record)
    if len(maps) != len(params.weights):
        raise T.ShapeError(f"record has {len(maps)} layers, projection expects "
                           f"{len(params.weights)}")
    acc = None
    for t, w, b in zip(maps, params.weights, params.biases):
        flat = T.reshape(t, (fh * fw, t.shape[-1]))
        proj = T.add(T.matmul(flat, w), b)
        acc = proj if acc is None else T.add(acc, proj)
    acc = T.mul(acc, 1.0 / len(maps))
    d = params.weights[0].shape[1]
    return T.reshape(acc, (fh, fw, d))


def canonical_input(record: FeatureRecord) -> T.Tensor:
    """F_i: raw layers upsampled to the finest grid and channel-concatenated."""
    maps, _ = _upsampled_layers(record)
    return T.concat(maps, axis=-1)


def nearest_codes(z: np.ndarray, codebook: np.ndarray, mode: str = "l2") -> np.ndarray:
    """Index of the closest code per row; ties resolve to the lowest index."""
    if mode == "l2":
        d = (z * z).sum(axis=1, keepdims=True) \
            - 2.0 * (z @ codebook.T) \
            + (codebook * codebook).sum(axis=1)[None, :]
        return np.argmin(d, axis=1)
    if mode == "cosine":
        zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        bn = codebook / np.maximum(np.linalg.norm(codebook, axis=1, keepdims=True), 1e-12)
        return np.argmax(zn @ bn.T, axis=1)
    raise ValueError(f"unknown nearest-code mode {mode!r}")


def quantize_nearest(z: np.ndarray, codebook: np.ndarray,
                     mode: str = "l2") -> tuple[int, np.ndarray]:
    """Single-vector convenience wrapper around ``nearest_codes``."""
    idx = int(nearest_codes(np.asarray(z, dtype=np.float64)[None, :],
                            np.asarray(codebook, dtype=np.float64), mode)[0])
    return idx, codebook[idx]


class ConceptVq:
    """Encoder/decoder stacks plus per-level, per-concept codebook deviations."""

    def __init__(self, levels: int, n_concepts: int, n_codes: int, d_feat: int,
                 in_channels: int, out_channels: int, rng: np.random.Generator,
                 init_scale: float = 0.02, nearest: str = "l2"):
        if levels < 1:
            raise ValueError("need at least one level")
        self.levels = levels
        self.n_concepts = n_concepts
        self.n_codes = n_codes
        self.d_feat = d_feat
        self.nearest = nearest
        self.enc: list[tuple[T.Tensor, ...]] = []
        for _ in range(levels):
            self.enc.append((
                T.Tensor(_linear_init(rng, in_channels, d_feat), requires_grad=True),
                T.Tensor(np.zeros(d_feat, dtype=np.float32), requires_grad=True),
                T.Tensor(_linear_init(rng, d_feat, d_feat, relu_gain=False), requires_grad=True),
                T.Tensor(np.zeros(d_feat, dtype=np.float32), requires_grad=True)))
        self.reduce: list[tuple[T.Tensor, T.Tensor]] = []
        for _ in range(levels - 1):
            self.reduce.append((
                T.Tensor(_linear_init(rng, 2 * d_feat, d_feat, relu_gain=False),
                         requires_grad=True),
                T.Tensor(np.zeros(d_feat, dtype=np.float32), requires_grad=True)))
        self.dec = (
            T.Tensor(_linear_init(rng, levels * d_feat, levels * d_feat), requires_grad=True),
            T.Tensor(np.zeros(levels * d_feat, dtype=np.float32), requires_grad=True),
            T.Tensor(_linear_init(rng, levels * d_feat, out_channels, relu_gain=False),
                     requires_grad=True),
            T.Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True))
        self.dev = []
        for _ in range(levels):
            row = []
            for _ in range(n_concepts):
                noise = (rng.standard_normal((n_codes, d_feat)) * init_scale)
                noise -= noise.mean(axis=0)  # books start centered on their anchor
                row.append(T.Tensor(noise.astype(np.float32), requires_grad=True))
            self.dev.append(row)

    def tensors(self) -> "OrderedDict[str, T.Tensor]":
        out = OrderedDict()
        for l, (w1, b1, w2, b2) in enumerate(self.enc):
            out[f"vq.enc.{l}.w1"] = w1
            out[f"vq.enc.{l}.b1"] = b1
            out[f"vq.enc.{l}.w2"] = w2
            out[f"vq.enc.{l}.b2"] = b2
        for l, (w, b) in enumerate(self.reduce):
            out[f"vq.red.{l}.w"] = w
            out[f"vq.red.{l}.b"] = b
        out["vq.dec.w1"], out["vq.dec.b1"] = self.dec[0], self.dec[1]
        out["vq.dec.w2"], out["vq.dec.b2"] = self.dec[2], self.dec[3]
        for l in range(self.levels):
            for c in range(self.n_concepts):
                out[f"vq.book.{l}.{c}"] = self.dev[l][c]
        return out


def _stack2(x: T.Tensor, w1, b1, w2, b2) -> T.Tensor:
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)


def hierarchical_forward(fp: T.Tensor, vq: ConceptVq, concepts: ConceptSet,
                         p: T.Tensor, stops: T.StopCapture | None = None
                         ) -> tuple[T.Tensor, T.Tensor]:
    """Quantize F_p through every level and decode.

    Returns the reconstruction (h, w, out_channels) and the per-pixel VQ
    objective (codebook pull toward detached latents plus commitment,
    weighted by the concept probabilities), shape (h*w,).
    """
    sc = stops if stops is not None else T.StopCapture("off")
    fh, fw, d = fp.shape
    flat = T.reshape(fp, (fh * fw, d))
    q_prev: T.Tensor | None = None
    level_outputs: list[T.Tensor] = []
    vq_px: T.Tensor | None = None
    for l in range(vq.levels):
        w1, b1, w2, b2 = vq.enc[l]
        z = _stack2(flat, w1, b1, w2, b2)
        if l == 0:
            q_in = z
        else:
            rw, rb = vq.reduce[l - 1]
            q_in = T.add(T.matmul(T.concat([z, q_prev], axis=-1), rw), rb)
        mixed: T.Tensor | None = None
        for c in range(vq.n_concepts):
            anchor = T.take(concepts.embeddings, c)
            book = T.add(vq.dev[l][c], anchor)
            idx = sc.value(lambda q=q_in, b=book: nearest_codes(q.data, b.data, vq.nearest))
            codes = T.gather_rows(book, idx)
            pull_diff = T.sub(codes, sc.stop(q_in))
            pull = T.tsum(T.mul(pull_diff, pull_diff), axis=-1)
            commit_diff = T.sub(q_in, sc.stop(codes))
            commit = T.tsum(T.mul(commit_diff, commit_diff), axis=-1)
            term = T.mul(T.take(p, c), T.add(pull, T.mul(commit, COMMITMENT)))
            vq_px = term if vq_px is None else T.add(vq_px, term)
            q_st = T.add(q_in, sc.stop(T.sub(codes, q_in)))
            contrib = T.mul(T.take(p, c), q_st)
            mixed = contrib if mixed is None else T.add(mixed, contrib)
        level_outputs.append(mixed)
        q_prev = mixed
    dw1, db1, dw2, db2 = vq.dec
    recon = _stack2(T.concat(level_outputs, axis=-1), dw1, db1, dw2, db2)
    out_c = dw2.shape[1]
    return T.reshape(recon, (fh, fw, out_c)), vq_px


def recon_anomaly_map(fi: T.Tensor, fr: T.Tensor) -> T.Tensor:
    """Per-pixel 0.5 * (1 - cos(F_i, F_r)); zero-norm pixels score 0.5."""
    if fi.shape != fr.shape:
        raise T.ShapeError(f"map shapes differ: {fi.shape} vs {fr.shape}")
    return T.mul(T.sub(T.constant(1.0), T.cosine_sim(fi, fr)), 0.5)


@dataclass
class GeneratorParams:
    """Five pointwise layers with standardization between the hidden ones."""

    weights: list[T.Tensor]
    biases: list[T.Tensor]
    bn_gamma: list[T.Tensor]
    bn_beta: list[T.Tensor]
    run_mean: list[np.ndarray] = field(default_factory=list)
    run_var: list[np.ndarray] = field(default_factory=list)
    momentum: float = 0.9

    @classmethod
    def build(cls, d_feat: int, hidden: int, rng: np.random.Generator,
              momentum: float = 0.9) -> "GeneratorParams":
        dims = [2 * d_feat, hidden, hidden, hidden, hidden, d_feat]
        ws, bs, gs, betas, rm, rv = [], [], [], [], [], []
        for i in range(5):
            ws.append(T.Tensor(_linear_init(rng, dims[i], dims[i + 1],
                                            relu_gain=i < 4), requires_grad=True))
            bs.append(T.Tensor(np.zeros(dims[i + 1], dtype=np.float32), requires_grad=True))
            if i < 4:
                gs.append(T.Tensor(np.ones(dims[i + 1], dtype=np.float32), requires_grad=True))
                betas.append(T.Tensor(np.zeros(dims[i + 1], dtype=np.float32),
                                      requires_grad=True))
                rm.append(np.zeros(dims[i + 1], dtype=np.float32))
                rv.append(np.ones(dims[i + 1], dtype=np.float32))
        return cls(ws, bs, gs, betas, rm, rv, momentum)

    def tensors(self) -> "OrderedDict[str, T.Tensor]":
        out = OrderedDict()
        for i in range(5):
            out[f"gen.{i}.w"] = self.weights[i]
            out[f"gen.{i}.b"] = self.biases[i]
            if i < 4:
                out[f"gen.{i}.bn_g"] = self.bn_gamma[i]
                out[f"gen.{i}.bn_b"] = self.bn_beta[i]
        return out

    def stats(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for i in range(4):
            out[f"gen.{i}.bn_mean"] = self.run_mean[i]
            out[f"gen.{i}.bn_var"] = self.run_var[i]
        return out


def generate_pseudo(fp: T.Tensor, prompt_vec: T.Tensor, gen: GeneratorParams,
                    training: bool) -> T.Tensor:
    """Fuse a feature map with one prompt vector into a pseudo feature map.

    Training mode standardizes against the current pixel batch and updates
    the running statistics in place; inference mode uses the frozen ones.
    """
    fh, fw, d = fp.shape
    if prompt_vec.data.shape != (d,):
        raise T.ShapeError(f"prompt vector shape {prompt_vec.data.shape}, expected ({d},)")
    flat = T.reshape(fp, (fh * fw, d))
    tiled = T.mul(T.constant(np.ones((fh * fw, 1), dtype=fp.dtype)),
                  T.reshape(prompt_vec, (1, d)))
    x = T.concat([flat, tiled], axis=-1)
    for i in range(5):
        x = T.add(T.matmul(x, gen.weights[i]), gen.biases[i])
        if i < 4:
            if training:
                x, mean, var = T.standardize(x, gen.bn_gamma[i], gen.bn_beta[i])
                m = gen.momentum
                gen.run_mean[i][...] = m * gen.run_mean[i] + (1 - m) * mean
                gen.run_var[i][...] = m * gen.run_var[i] + (1 - m) * var
            else:
                x = T.affine_standardize(x, gen.bn_gamma[i], gen.bn_beta[i],
                                         gen.run_mean[i], gen.run_var[i])
            x = T.relu(x)
    return T.reshape(x, (fh, fw, d))


def re_anchor(vq: ConceptVq) -> None:
    """Recenter every codebook so its mean equals the concept embedding."""
    for level in vq.dev:
        for dev in level:
            dev.data -= dev.data.mean(axis=0)


def code_budget(n_codes: int, n_concepts: int, d_feat: int) -> int:
    """Total learnable code parameters across all concepts of one level set."""
    return n_codes * n_concepts * d_feat
