"""Reading and writing LTOF v1, the engine's feature-archive format.

The exporter keeps its own implementation of the published byte layout
so it has no import-time dependency on the engine.  Everything is
little-endian::

    "LTOF"  u32 version=1
    u64 header length, UTF-8 JSON:
        {d_final, layers: [{c, h, w}], n_records, n_vocab, provenance}
    records, each:
        u16-length UTF-8 id, u16-length UTF-8 class label,
        u8 split (0 train, 1 test), u8 anomaly flag,
        u32 mask H, u32 mask W, u32 run count,
            runs of one-pixels as (u32 flat start, u32 length), row-major,
        d_final f32 final vector,
        per layer h*w*c f32, channel-last
    u32 vocab count, each: u16-length UTF-8 name, d_final f32
    optional prompt section (present only when nonempty):
        u32 count, each: u16 vocab index, u16-length UTF-8 text

A mask written as H = W = 0 with zero runs means "not provided".
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LTOF"
VERSION = 1

_U8X2 = struct.Struct("<BB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U32X2 = struct.Struct("<II")
_U32X3 = struct.Struct("<III")
_U64 = struct.Struct("<Q")

__all__ = ["Archive", "LtofError", "Record", "VocabEntry", "read_ltof",
           "write_ltof"]


class LtofError(ValueError):
    """Bytes that are not a well-formed LTOF v1 archive."""


@dataclass
class Record:
    """One image's exported features and labels."""

    record_id: str
    class_label: str
    split: str  # "train" | "test"
    anomaly_flag: int
    mask: np.ndarray | None  # (H, W) uint8 ground truth, None when absent
    final_vec: np.ndarray  # (d_final,) float32
    layer_maps: list[np.ndarray]  # (h, w, c) float32 per tapped block


@dataclass
class VocabEntry:
    name: str
    vec: np.ndarray  # (d_final,) float32


@dataclass
class Archive:
    """In-memory LTOF archive, field-compatible with the engine's loader."""

    d_final: int
    layer_shapes: list[tuple[int, int, int]]  # (h, w, c) per tapped block
    provenance: str
    records: list[Record] = field(default_factory=list)
    vocab: list[VocabEntry] = field(default_factory=list)
    prompt_texts: list[tuple[int, str]] = field(default_factory=list)

    def vocab_index(self, name: str) -> int:
        for i, entry in enumerate(self.vocab):
            if entry.name == name:
                return i
        raise KeyError(name)


def _encode_mask(mask: np.ndarray) -> bytes:
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    edges = np.diff(np.concatenate([[0], flat, [0]]).astype(np.int8))
    starts = np.flatnonzero(edges == 1)
    lengths = np.flatnonzero(edges == -1) - starts
    out = [_U32X3.pack(mask.shape[0], mask.shape[1], len(starts))]
    out.extend(_U32X2.pack(int(s), int(n)) for s, n in zip(starts, lengths))
    return b"".join(out)


def _decode_mask(cur: "_Cursor", what: str) -> np.ndarray | None:
    h, w, nruns = cur.take(_U32X3, what)
    if h == 0 and w == 0:
        if nruns:
            raise LtofError(f"{what}: {nruns} runs but no mask dimensions")
        return None
    flat = np.zeros(h * w, dtype=np.uint8)
    for _ in range(nruns):
        start, length = cur.take(_U32X2, what)
        if start + length > flat.size:
            raise LtofError(f"{what}: run ({start}, {length}) beyond {h}x{w}")
        flat[start:start + length] = 1
    return flat.reshape(h, w)


def _pack_text(text: str, what: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise LtofError(f"{what} longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def _f32(arr: np.ndarray, shape: tuple[int, ...], what: str) -> bytes:
    out = np.asarray(arr, dtype="<f4")
    if out.shape != shape:
        raise LtofError(f"{what}: shape {out.shape}, expected {shape}")
    return out.tobytes()


def write_ltof(archive: Archive, path: str | Path) -> int:
    """Serialize ``archive``; returns the number of bytes written."""
    header = {
        "d_final": int(archive.d_final),
        "layers": [{"c": int(c), "h": int(h), "w": int(w)}
                   for (h, w, c) in archive.layer_shapes],
        "n_records": len(archive.records),
        "n_vocab": len(archive.vocab),
        "provenance": archive.provenance,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    buf.write(_U64.pack(len(head)))
    buf.write(head)
    for rec in archive.records:
        what = f"record {rec.record_id!r}"
        buf.write(_pack_text(rec.record_id, what))
        buf.write(_pack_text(rec.class_label, what))
        buf.write(_U8X2.pack(0 if rec.split == "train" else 1, int(rec.anomaly_flag)))
        buf.write(_U32X3.pack(0, 0, 0) if rec.mask is None else _encode_mask(rec.mask))
        buf.write(_f32(rec.final_vec, (archive.d_final,), f"{what} final vector"))
        if len(rec.layer_maps) != len(archive.layer_shapes):
            raise LtofError(f"{what}: {len(rec.layer_maps)} layer maps, "
                            f"header declares {len(archive.layer_shapes)}")
        for li, (lm, shape) in enumerate(zip(rec.layer_maps, archive.layer_shapes)):
            buf.write(_f32(lm, shape, f"{what} layer {li}"))
    buf.write(_U32.pack(len(archive.vocab)))
    for entry in archive.vocab:
        buf.write(_pack_text(entry.name, f"vocab {entry.name!r}"))
        buf.write(_f32(entry.vec, (archive.d_final,), f"vocab {entry.name!r}"))
    if archive.prompt_texts:
        buf.write(_U32.pack(len(archive.prompt_texts)))
        for idx, text in archive.prompt_texts:
            if not 0 <= idx < len(archive.vocab):
                raise LtofError(f"prompt {text!r}: vocab index {idx} out of range")
            buf.write(_U16.pack(idx))
            buf.write(_pack_text(text, f"prompt {text!r}"))
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


class _Cursor:
    """Sequential parser over the archive bytes with offset-aware errors."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def raw(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise LtofError(f"truncated at byte {self.pos}: {n} bytes of {what} missing")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def take(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.raw(fmt.size, what))

    def text(self, what: str) -> str:
        (n,) = self.take(_U16, what)
        try:
            return self.raw(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise LtofError(f"{what} at byte {self.pos}: {e}") from None

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.raw(4 * count, what), dtype="<f4").copy()


def read_ltof(path: str | Path) -> Archive:
    """Parse an LTOF v1 file into an :class:`Archive`."""
    cur = _Cursor(Path(path).read_bytes())
    if cur.raw(4, "magic") != MAGIC:
        raise LtofError("bad magic: not an LTOF archive")
    (version,) = cur.take(_U32, "version")
    if version != VERSION:
        raise LtofError(f"unsupported LTOF version {version}")
    (hlen,) = cur.take(_U64, "header length")
    try:
        header = json.loads(cur.raw(hlen, "header").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise LtofError(f"header is not valid JSON: {e}") from None
    missing = [k for k in ("d_final", "layers", "n_records", "n_vocab", "provenance")
               if k not in header]
    if missing:
        raise LtofError(f"header missing fields {missing}")
    archive = Archive(
        d_final=int(header["d_final"]),
        layer_shapes=[(int(l["h"]), int(l["w"]), int(l["c"])) for l in header["layers"]],
        provenance=str(header["provenance"]))
    for i in range(int(header["n_records"])):
        what = f"record {i}"
        rid = cur.text(f"{what} id")
        label = cur.text(f"{what} class label")
        split_b, flag = cur.take(_U8X2, f"{what} split/flag")
        if split_b not in (0, 1):
            raise LtofError(f"{what}: split byte {split_b}")
        mask = _decode_mask(cur, f"{what} mask")
        vec = cur.floats(archive.d_final, f"{what} final vector")
        maps = [cur.floats(h * w * c, f"{what} layer {li}").reshape(h, w, c)
                for li, (h, w, c) in enumerate(archive.layer_shapes)]
        archive.records.append(Record(
            record_id=rid, class_label=label,
            split="train" if split_b == 0 else "test", anomaly_flag=int(flag),
            mask=mask, final_vec=vec, layer_maps=maps))
    (nvocab,) = cur.take(_U32, "vocab count")
    for i in range(nvocab):
        name = cur.text(f"vocab {i} name")
        archive.vocab.append(VocabEntry(name, cur.floats(archive.d_final, f"vocab {i}")))
    if cur.pos < len(cur.data):
        (nprompts,) = cur.take(_U32, "prompt count")
        for i in range(nprompts):
            (idx,) = cur.take(_U16, f"prompt {i} index")
            archive.prompt_texts.append((idx, cur.text(f"prompt {i} text")))
    if cur.pos != len(cur.data):
        raise LtofError(f"{len(cur.data) - cur.pos} trailing bytes at byte {cur.pos}")
    return archive
