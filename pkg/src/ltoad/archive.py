"""Feature-embedding archives (LTOF v1) and a synthetic archive generator.

Binary layout, all little-endian:

    magic "LTOF" | version u32 = 1
    header-JSON length u64 | UTF-8 JSON
        {d_final, layers: [{c, h, w}], n_records, n_vocab, provenance}
    per record:
        id          u16 length + UTF-8
        class_label u16 length + UTF-8
        split       u8   (0 = train, 1 = test)
        anomaly     u8
        mask        H u32, W u32, run-count u32,
                    runs of 1-pixels as (start u32, len u32), row-major flat
        f_final     d_final * f32
        layers      h*w*c * f32 each, channel-last
    vocab: count u32, then per entry u16 name + d_final * f32
    prompt texts (optional): count u32 of (vocab-index u16, u16 text) pairs

A mask with H == W == 0 means "not provided" (training records). Prompt
texts attach phrases to vocab entries; each phrase names another vocab
entry that stores its embedding, so archives are self-contained without
any text encoder at load time.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ArchiveError",
    "FeatureRecord",
    "VocabEmbedding",
    "EmbeddingArchive",
    "SynthConfig",
    "write_archive",
    "read_archive",
    "validate",
    "synth_generate",
    "mask_to_runs",
    "runs_to_mask",
]

MAGIC = b"LTOF"
VERSION = 1


class ArchiveError(ValueError):
    """Malformed archive bytes or inconsistent archive contents."""


@dataclass
class FeatureRecord:
    """One image's frozen features: per-layer maps plus the final vector."""

    record_id: str
    class_label: str
    split: str  # "train" | "test"
    anomaly_flag: int
    mask: np.ndarray | None  # (H, W) uint8, or None when not provided
    final_vec: np.ndarray  # (d_final,) float32
    layer_maps: list[np.ndarray]  # each (h, w, c) float32, channel-last


@dataclass
class VocabEmbedding:
    name: str
    vec: np.ndarray  # (d_final,) float32


@dataclass
class EmbeddingArchive:
    d_final: int
    layer_shapes: list[tuple[int, int, int]]  # (h, w, c) per layer
    provenance: str  # "synthetic" | "exported"
    records: list[FeatureRecord] = field(default_factory=list)
    vocab: list[VocabEmbedding] = field(default_factory=list)
    prompt_texts: list[tuple[int, str]] = field(default_factory=list)

    def train_records(self) -> list[FeatureRecord]:
        return [r for r in self.records if r.split == "train"]

    def test_records(self) -> list[FeatureRecord]:
        return [r for r in self.records if r.split == "test"]

    def vocab_index(self, name: str) -> int:
        for i, v in enumerate(self.vocab):
            if v.name == name:
                return i
        raise KeyError(name)

    def prompts_for(self, vocab_idx: int) -> list[str]:
        return [text for idx, text in self.prompt_texts if idx == vocab_idx]


def mask_to_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Row-major RLE of the 1-pixels as (flat start, length) pairs."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return []
    padded = np.concatenate([[0], flat, [0]])
    d = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def runs_to_mask(runs, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    flat = np.zeros(h * w, dtype=np.uint8)
    for start, length in runs:
        if start < 0 or length < 0 or start + length > flat.size:
            raise ArchiveError(f"mask run ({start}, {length}) exceeds {h}x{w} mask")
        flat[start:start + length] = 1
    return flat.reshape(h, w)


def _pack_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ArchiveError(f"string too long ({len(b)} bytes)")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def write_archive(archive: EmbeddingArchive, path: str) -> int:
    """Serialize to ``path``; returns the byte count written."""
    header = {
        "d_final": int(archive.d_final),
        "layers": [{"c": int(c), "h": int(h), "w": int(w)} for (h, w, c) in archive.layer_shapes],
        "n_records": len(archive.records),
        "n_vocab": len(archive.vocab),
        "provenance": archive.provenance,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(hdr)))
    buf.write(hdr)
    for rec in archive.records:
        _pack_str(buf, rec.record_id)
        _pack_str(buf, rec.class_label)
        split = 0 if rec.split == "train" else 1
        buf.write(struct.pack("<BB", split, int(rec.anomaly_flag)))
        if rec.mask is None:
            buf.write(struct.pack("<III", 0, 0, 0))
        else:
            mh, mw = rec.mask.shape
            runs = mask_to_runs(rec.mask)
            buf.write(struct.pack("<III", mh, mw, len(runs)))
            for start, length in runs:
                buf.write(struct.pack("<II", start, length))
        vec = np.asarray(rec.final_vec, dtype="<f4")
        if vec.shape != (archive.d_final,):
            raise ArchiveError(f"record {rec.record_id!r}: f_final shape {vec.shape}")
        buf.write(vec.tobytes())
        if len(rec.layer_maps) != len(archive.layer_shapes):
            raise ArchiveError(f"record {rec.record_id!r}: layer count mismatch")
        for lm, (h, w, c) in zip(rec.layer_maps, archive.layer_shapes):
            arr = np.asarray(lm, dtype="<f4")
            if arr.shape != (h, w, c):
                raise ArchiveError(
                    f"record {rec.record_id!r}: layer shape {arr.shape} != {(h, w, c)}")
            buf.write(arr.tobytes())
    buf.write(struct.pack("<I", len(archive.vocab)))
    for v in archive.vocab:
        _pack_str(buf, v.name)
        vec = np.asarray(v.vec, dtype="<f4")
        if vec.shape != (archive.d_final,):
            raise ArchiveError(f"vocab {v.name!r}: vector shape {vec.shape}")
        buf.write(vec.tobytes())
    if archive.prompt_texts:
        buf.write(struct.pack("<I", len(archive.prompt_texts)))
        for idx, text in archive.prompt_texts:
            if not 0 <= idx < len(archive.vocab):
                raise ArchiveError(f"prompt text references vocab index {idx}")
            buf.write(struct.pack("<H", idx))
            _pack_str(buf, text)
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def need(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise ArchiveError(f"truncated archive: needed {n} bytes for {what} "
                               f"at byte {self.off}")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.need(size, what))

    def read_str(self, what: str) -> str:
        (n,) = self.unpack("<H", what + " length")
        try:
            return self.need(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveError(f"invalid UTF-8 in {what} at byte {self.off}: {e}") from None

    def read_f32(self, count: int, what: str) -> np.ndarray:
        raw = self.need(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()


def read_archive(path: str) -> EmbeddingArchive:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.need(4, "magic") != MAGIC:
        raise ArchiveError("bad magic at byte 0 (not an LTOF archive)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version} at byte 4")
    (hlen,) = r.unpack("<Q", "header length")
    hstart = r.off
    try:
        header = json.loads(r.need(hlen, "header JSON").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ArchiveError(f"invalid header JSON at byte {hstart}: {e}") from None
    for key in ("d_final", "layers", "n_records", "n_vocab", "provenance"):
        if key not in header:
            raise ArchiveError(f"header missing field {key!r}")
    d_final = int(header["d_final"])
    layer_shapes = [(int(l["h"]), int(l["w"]), int(l["c"])) for l in header["layers"]]
    if d_final < 1 or any(v < 1 for s in layer_shapes for v in s):
        raise ArchiveError("header dimensions must be positive")
    archive = EmbeddingArchive(d_final=d_final, layer_shapes=layer_shapes,
                               provenance=str(header["provenance"]))
    for i in range(int(header["n_records"])):
        rid = r.read_str(f"record {i} id")
        label = r.read_str(f"record {i} class label")
        split_b, flag = r.unpack("<BB", f"record {i} flags")
        if split_b not in (0, 1):
            raise ArchiveError(f"record {rid!r}: split byte {split_b} at byte {r.off - 2}")
        mh, mw, nruns = r.unpack("<III", f"record {i} mask dims")
        runs = [r.unpack("<II", f"record {i} mask run") for _ in range(nruns)]
        if mh == 0 and mw == 0:
            if nruns:
                raise ArchiveError(f"record {rid!r}: runs present without mask dims")
            mask = None
        else:
            mask = runs_to_mask(runs, (mh, mw))
        vec = r.read_f32(d_final, f"record {i} final vector")
        maps = []
        for (h, w, c) in layer_shapes:
            maps.append(r.read_f32(h * w * c, f"record {i} layer map").reshape(h, w, c))
        archive.records.append(FeatureRecord(
            record_id=rid, class_label=label, split="train" if split_b == 0 else "test",
            anomaly_flag=int(flag), mask=mask, final_vec=vec, layer_maps=maps))
    (nvocab,) = r.unpack("<I", "vocab count")
    if nvocab != int(header["n_vocab"]):
        raise ArchiveError(f"vocab count {nvocab} disagrees with header {header['n_vocab']}")
    for i in range(nvocab):
        name = r.read_str(f"vocab {i} name")
        archive.vocab.append(VocabEmbedding(name, r.read_f32(d_final, f"vocab {i} vector")))
    if r.off < len(data):
        (nprompts,) = r.unpack("<I", "prompt count")
        for i in range(nprompts):
            (idx,) = r.unpack("<H", f"prompt {i} index")
            if idx >= nvocab:
                raise ArchiveError(f"prompt {i} references vocab index {idx} of {nvocab}")
            archive.prompt_texts.append((idx, r.read_str(f"prompt {i} text")))
    if r.off != len(data):
        raise ArchiveError(f"{len(data) - r.off} trailing bytes at byte {r.off}")
    return archive


def validate(archive: EmbeddingArchive) -> list[str]:
    """Return human-readable contract violations (empty list when clean)."""
    problems: list[str] = []
    seen_ids: set[str] = set()
    for rec in archive.records:
        rid = rec.record_id
        if rid in seen_ids:
            problems.append(f"record {rid!r}: duplicate id")
        seen_ids.add(rid)
        if rec.split == "train" and rec.anomaly_flag:
            problems.append(f"record {rid!r}: train split carries anomaly flag")
        if rec.mask is not None:
            has_pos = bool(rec.mask.any())
            if has_pos != bool(rec.anomaly_flag):
                problems.append(f"record {rid!r}: anomaly flag {rec.anomaly_flag} "
                                f"vs mask positives {has_pos}")
        elif rec.anomaly_flag and rec.split == "test":
            problems.append(f"record {rid!r}: anomalous test record without mask")
        if rec.final_vec.shape != (archive.d_final,):
            problems.append(f"record {rid!r}: final vector shape {rec.final_vec.shape}")
        if len(rec.layer_maps) != len(archive.layer_shapes):
            problems.append(f"record {rid!r}: {len(rec.layer_maps)} layers, "
                            f"header says {len(archive.layer_shapes)}")
        else:
            for li, (lm, shape) in enumerate(zip(rec.layer_maps, archive.layer_shapes)):
                if lm.shape != shape:
                    problems.append(f"record {rid!r}: layer {li} shape {lm.shape} != {shape}")
        if not np.isfinite(rec.final_vec).all() or \
                any(not np.isfinite(m).all() for m in rec.layer_maps):
            problems.append(f"record {rid!r}: non-finite feature values")
    names = [v.name for v in archive.vocab]
    if len(set(names)) != len(names):
        problems.append("vocab names are not unique")
    for v in archive.vocab:
        if v.vec.shape != (archive.d_final,):
            problems.append(f"vocab {v.name!r}: vector shape {v.vec.shape}")
    name_set = set(names)
    for idx, text in archive.prompt_texts:
        if not 0 <= idx < len(archive.vocab):
            problems.append(f"prompt {text!r}: vocab index {idx} out of range")
        if text not in name_set:
            problems.append(f"prompt {text!r}: no vocab entry stores its embedding")
    if archive.provenance not in ("synthetic", "exported"):
        problems.append(f"unknown provenance {archive.provenance!r}")
    return problems


@dataclass
class SynthConfig:
    """Knobs for the synthetic archive generator.

    Per-layer pixels are unit vectors obtained by mapping a shared latent
    (class prototype or defect direction, plus noise) through a fixed
    orthonormal per-layer mixing, so every layer carries the same semantic
    structure at its own channel width. Channel counts must therefore be
    >= d_final.
    """

    class_names: list[str]
    train_counts: list[int]
    test_normals: list[int]
    test_anomalies: list[int]
    d_final: int = 48
    layer_shapes: tuple = ((8, 8, 48), (4, 4, 56), (2, 2, 64), (1, 1, 72))
    mask_size: tuple[int, int] = (32, 32)
    patch_range: tuple[int, int] = (2, 4)  # in finest-layer pixels
    noise_scale: float = 0.15
    final_noise: float = 0.05
    prompt_noise: float = 0.15
    n_distractors: int = 20
    abnormal_prompts: int = 5


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v if n == 0 else v / n


def _per_class(values, k: int, what: str) -> list[int]:
    out = list(values) if isinstance(values, (list, tuple)) else [int(values)] * k
    if len(out) != k:
        raise ValueError(f"{what}: expected {k} entries, got {len(out)}")
    if any(v < 0 for v in out):
        raise ValueError(f"{what}: counts must be non-negative")
    return out


def synth_generate(cfg: SynthConfig, seed: int) -> EmbeddingArchive:
    """Build a fully synthetic archive; a pure function of (cfg, seed)."""
    k = len(cfg.class_names)
    if k < 1:
        raise ValueError("need at least one class")
    if cfg.d_final < 2:
        raise ValueError("d_final must be >= 2")
    for (h, w, c) in cfg.layer_shapes:
        if min(h, w, c) < 1:
            raise ValueError("layer dims must be positive")
        if c < cfg.d_final:
            raise ValueError(f"layer channels {c} must be >= d_final {cfg.d_final}")
    train_counts = _per_class(cfg.train_counts, k, "train_counts")
    test_norm = _per_class(cfg.test_normals, k, "test_normals")
    test_anom = _per_class(cfg.test_anomalies, k, "test_anomalies")
    if any(n < 1 for n in train_counts):
        raise ValueError("train_counts must be >= 1 per class")
    fh, fw, _ = cfg.layer_shapes[0]
    mh, mw = cfg.mask_size
    if mh % fh or mw % fw:
        raise ValueError("mask size must be an integer multiple of the finest layer")
    lo, hi = cfg.patch_range
    if not 1 <= lo <= hi <= min(fh, fw):
        raise ValueError("patch_range must fit inside the finest layer")

    rng = np.random.default_rng(seed)
    d = cfg.d_final
    protos = np.stack([_unit(rng.standard_normal(d)) for _ in range(k)])
    defects = np.stack([_unit(rng.standard_normal(d)) for _ in range(k)])
    mixers = []
    for (_, _, c) in cfg.layer_shapes:
        q, _ = np.linalg.qr(rng.standard_normal((c, d)))
        mixers.append(q.astype(np.float64))

    def latents(base: np.ndarray, count: int) -> np.ndarray:
        z = rng.standard_normal((count, d))
        z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        v = base + cfg.noise_scale * z
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    def defect_cells(patch, h: int, w: int) -> np.ndarray:
        # a cell turns defective when the patch covers at least half its area
        r0, r1, c0, c1 = patch
        sy, sx = h / fh, w / fw
        y0 = np.arange(h) / sy
        x0 = np.arange(w) / sx
        oy = np.maximum(0.0, np.minimum(y0 + 1 / sy, r1) - np.maximum(y0, r0))
        ox = np.maximum(0.0, np.minimum(x0 + 1 / sx, c1) - np.maximum(x0, c0))
        return (oy[:, None] * ox[None, :]) >= 0.5 / (sy * sx)

    def render(ci: int, patch: tuple[int, int, int, int] | None):
        maps = []
        for (h, w, c), mix in zip(cfg.layer_shapes, mixers):
            m = latents(protos[ci], h * w).reshape(h, w, d)
            if patch is not None:
                bad = defect_cells(patch, h, w)
                if bad.any():
                    m[bad] = latents(defects[ci], int(bad.sum()))
            maps.append((m @ mix.T).astype(np.float32))
        return maps

    archive = EmbeddingArchive(d_final=d, layer_shapes=[tuple(s) for s in cfg.layer_shapes],
                               provenance="synthetic")
    for ci, name in enumerate(cfg.class_names):
        for n in range(train_counts[ci]):
            archive.records.append(FeatureRecord(
                record_id=f"{name}-train-{n:04d}", class_label=name, split="train",
                anomaly_flag=0, mask=None,
                final_vec=_unit(protos[ci] + cfg.final_noise * rng.standard_normal(d)).astype(np.float32),
                layer_maps=render(ci, None)))
        for n in range(test_norm[ci]):
            archive.records.append(FeatureRecord(
                record_id=f"{name}-good-{n:04d}", class_label=name, split="test",
                anomaly_flag=0, mask=np.zeros((mh, mw), dtype=np.uint8),
                final_vec=_unit(protos[ci] + cfg.final_noise * rng.standard_normal(d)).astype(np.float32),
                layer_maps=render(ci, None)))
        for n in range(test_anom[ci]):
            ph = int(rng.integers(lo, hi + 1))
            pw = int(rng.integers(lo, hi + 1))
            r0 = int(rng.integers(0, fh - ph + 1))
            c0 = int(rng.integers(0, fw - pw + 1))
            patch = (r0, r0 + ph, c0, c0 + pw)
            mask = np.zeros((mh, mw), dtype=np.uint8)
            sy, sx = mh // fh, mw // fw
            mask[r0 * sy:(r0 + ph) * sy, c0 * sx:(c0 + pw) * sx] = 1
            archive.records.append(FeatureRecord(
                record_id=f"{name}-defect-{n:04d}", class_label=name, split="test",
                anomaly_flag=1, mask=mask,
                final_vec=_unit(protos[ci] + cfg.final_noise * rng.standard_normal(d)).astype(np.float32),
                layer_maps=render(ci, patch)))

    for ci, name in enumerate(cfg.class_names):
        archive.vocab.append(VocabEmbedding(name, protos[ci].astype(np.float32)))
    for i in range(cfg.n_distractors):
        archive.vocab.append(VocabEmbedding(
            f"filler{i:02d}", _unit(rng.standard_normal(d)).astype(np.float32)))
    for ci, name in enumerate(cfg.class_names):
        normal_phrase = f"a flawless {name}"
        archive.vocab.append(VocabEmbedding(normal_phrase, protos[ci].astype(np.float32)))
        archive.prompt_texts.append((ci, normal_phrase))
        for a in range(cfg.abnormal_prompts):
            phrase = f"a damaged {name} ({a})"
            vec = _unit(defects[ci] + cfg.prompt_noise * rng.standard_normal(d))
            archive.vocab.append(VocabEmbedding(phrase, vec.astype(np.float32)))
            archive.prompt_texts.append((ci, phrase))
    return archive
